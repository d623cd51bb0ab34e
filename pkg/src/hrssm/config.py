"""Run configuration: one dataclass per section, INI-style text files and
dotted ``section.key=value`` overrides.

Unknown sections or keys are errors.  :func:`describe_defaults` renders
every default for ``--help``.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field, fields

from .envs import EnvConfig


@dataclass
class MaskConfig:
    mask_ratio: float = 0.5
    cube_h: int = 4
    cube_w: int = 4
    cube_depth: int = 2
    mask_fill: float = 0.0


@dataclass
class ModelConfig:
    deter: int = 64            # recurrent width
    groups: int = 8            # latent groups L
    classes: int = 8           # classes per group C
    embed: int = 256
    hidden: int = 128
    proj: int = 64             # projection width used by the latent losses
    unimix: float = 0.01
    bins: int = 41
    bin_low: float = -10.0
    bin_high: float = 10.0
    ema_m: float = 0.01        # weight on the online network in the EMA update
    free_nats: float = 1.0
    beta_dyn: float = 0.5
    beta_rep: float = 0.1
    sim_gamma: float = 0.99
    sim_loss_variant: str = "cross"         # cross | mask
    predictor_input: str = "raw"          # raw | normalized
    latent_mode: str = "sample"           # sample | probs
    lr: float = 1e-4
    eps: float = 1e-8
    clip: float = 1000.0
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class AgentConfig:
    horizon: int = 15
    discount: float = 1.0 - 1.0 / 333.0
    lam: float = 0.95
    entropy_scale: float = 3e-4
    critic_ema_decay: float = 0.98
    critic_ema_reg: float = 1.0
    return_decay: float = 0.99
    return_limit: float = 1.0
    hidden: int = 128
    actor_unimix: float = 0.01
    lr: float = 3e-5
    eps: float = 1e-5
    clip: float = 100.0


@dataclass
class TrainerConfig:
    batch_size: int = 8
    batch_length: int = 16
    train_every: int = 16      # env steps per collect phase
    updates_per_collect: int = 4
    prefill: int = 500
    explore_noise: float = 0.0  # discrete: random-action prob; continuous: gaussian std
    total_env_steps: int = 20500
    capacity: int = 100000
    log_every: int = 1
    checkpoint_every: int = 1000
    precision: int = 32
    collector_thread: bool = False
    queue_size: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    SECTIONS = ("env", "mask", "model", "agent", "trainer")

    def validate(self) -> None:
        self.env.validate()
        m, md, tr = self.mask, self.model, self.trainer
        if not 0.0 <= m.mask_ratio < 1.0:
            raise ConfigError("mask.mask_ratio", f"must lie in [0, 1), got {m.mask_ratio}")
        if tr.batch_length % m.cube_depth:
            raise ConfigError("trainer.batch_length",
                              f"{tr.batch_length} not divisible by mask.cube_depth={m.cube_depth}")
        for key, p in (("cube_h", m.cube_h), ("cube_w", m.cube_w)):
            if p < 1 or self.env.image % p:
                raise ConfigError(f"mask.{key}", f"{p} does not divide env.image={self.env.image}")
        if md.sim_loss_variant not in ("cross", "mask"):
            raise ConfigError("model.sim_loss_variant", "must be cross or mask")
        if md.predictor_input not in ("raw", "normalized"):
            raise ConfigError("model.predictor_input", "must be raw or normalized")
        if md.latent_mode not in ("sample", "probs"):
            raise ConfigError("model.latent_mode", "must be sample or probs")
        if md.bins < 2 or md.bin_high <= md.bin_low:
            raise ConfigError("model.bins", "need at least two bins over a non-empty range")
        if not 0.0 <= md.ema_m <= 1.0:
            raise ConfigError("model.ema_m", "must lie in [0, 1]")
        if tr.precision not in (32, 64):
            raise ConfigError("trainer.precision", "must be 32 or 64")
        if tr.batch_size < 2:
            raise ConfigError("trainer.batch_size", "the similarity loss pairs rows; need >= 2")
        if not 0.0 <= tr.explore_noise <= 1.0:
            raise ConfigError("trainer.explore_noise", "must lie in [0, 1]")
        if tr.prefill < tr.batch_length:
            raise ConfigError("trainer.prefill", "must cover at least one batch window")

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": str(self.seed)}
        for name in self.SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: repr(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


def _coerce(key: str, raw: str, current):
    text = raw.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        text = text[1:-1]
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(current).__name__}") from None
    return text


def set_key(cfg: RunConfig, dotted: str, value: str) -> None:
    parts = dotted.split(".")
    if parts == ["seed"] or parts == ["run", "seed"]:
        cfg.seed = _coerce("seed", value, cfg.seed)
        return
    if len(parts) != 2 or parts[0] not in RunConfig.SECTIONS:
        raise ConfigError(dotted, f"unknown key; sections are {', '.join(RunConfig.SECTIONS)}")
    sec = getattr(cfg, parts[0])
    names = {f.name for f in fields(sec)}
    if parts[1] not in names:
        raise ConfigError(dotted, f"unknown key; valid keys: {', '.join(sorted(names))}")
    setattr(sec, parts[1], _coerce(dotted, value, getattr(sec, parts[1])))


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    key, value = text.split("=", 1)
    return key.strip(), value


def _apply_parser(cfg: RunConfig, cp: configparser.ConfigParser) -> None:
    for section in cp.sections():
        for key, value in cp.items(section):
            if section == "run" and key != "seed":
                raise ConfigError(f"run.{key}", "unknown key; [run] only holds seed")
            dotted = "seed" if section == "run" else f"{section}.{key}"
            set_key(cfg, dotted, value)


def load_config(path: str | None = None, overrides: list[str] = (),
                seed: int | None = None, text: str | None = None) -> RunConfig:
    """Defaults, then the file (or ``text``), then overrides, then ``seed``."""
    cfg = RunConfig()
    if path or text:
        cp = configparser.ConfigParser()
        if path:
            with open(path) as fh:
                cp.read_file(fh)
        else:
            cp.read_string(text)
        _apply_parser(cfg, cp)
    for ov in overrides:
        set_key(cfg, *parse_override(ov))
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg


def smoke_config(seed: int = 0) -> RunConfig:
    """Small run used by smoke tests: ~200 train steps."""
    cfg = RunConfig(seed=seed)
    cfg.trainer.prefill = 200
    cfg.trainer.total_env_steps = 200 + 200 * cfg.trainer.train_every // cfg.trainer.updates_per_collect
    cfg.trainer.checkpoint_every = 100
    return cfg


def describe_defaults() -> str:
    cfg = RunConfig()
    lines = [f"  seed = {cfg.seed}"]
    for name in RunConfig.SECTIONS:
        sec = getattr(cfg, name)
        for f in fields(sec):
            lines.append(f"  {name}.{f.name} = {getattr(sec, f.name)!r}")
    return "\n".join(lines)


def replace(cfg: RunConfig, **sections) -> RunConfig:
    """Deep copy with whole sections swapped."""
    out = dataclasses.replace(cfg, **{k: dataclasses.replace(getattr(cfg, k))
                                      for k in RunConfig.SECTIONS})
    for k, v in sections.items():
        setattr(out, k, v)
    return out
