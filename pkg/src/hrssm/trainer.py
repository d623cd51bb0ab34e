"""Training loop: replay, collection, world-model and behaviour updates,
metrics stream and checkpoints."""
from __future__ import annotations

import json
import logging
import os
import queue
import shutil
import threading
from pathlib import Path

import numpy as np

from . import tensor as T
from .agent import ActorCritic
from .config import RunConfig
from .envs import PixelEnv
from .masking import CuboidSpec, mask_batch
from .nn import Adam
from .tensor import Tensor
from .world_model import LossBreakdown, WorldModel

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
RNG_STREAMS = ("env", "replay", "mask", "model", "agent", "collect")


class ReplayBuffer:
    """FIFO ring of single steps.

    Each record holds the observation, the action taken *before* it, the
    reward received on arriving there, the continue flag and ``is_first``.
    Windows are contiguous in insertion order and may cross an episode
    boundary; the crossing is marked by ``is_first`` (reset-inclusive).
    """

    FIELDS = ("obs", "action", "reward", "cont", "is_first")

    def __init__(self, capacity: int, obs_shape: tuple, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs_shape, self.act_dim = tuple(obs_shape), act_dim
        self.data = {
            "obs": np.empty((capacity, *obs_shape), np.float32),
            "action": np.empty((capacity, act_dim), np.float32),
            "reward": np.empty(capacity, np.float64),
            "cont": np.empty(capacity, np.float64),
            "is_first": np.empty(capacity, bool),
        }
        self.head = 0     # next write position
        self.size = 0
        self.total_pushed = 0
        self.lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def push(self, obs, action, reward, cont, is_first) -> None:
        with self.lock:
            i = self.head
            d = self.data
            d["obs"][i] = obs
            d["action"][i] = action
            d["reward"][i] = reward
            d["cont"][i] = cont
            d["is_first"][i] = is_first
            self.head = (i + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
            self.total_pushed += 1

    def _oldest(self) -> int:
        return (self.head - self.size) % self.capacity

    def sample(self, B: int, T_len: int, rng: np.random.Generator) -> dict:
        with self.lock:
            if self.size < T_len:
                raise RuntimeError(f"replay holds {self.size} steps; need {T_len} to sample a window "
                                   "(prefill not complete)")
            starts = rng.integers(0, self.size - T_len + 1, size=B)
            idx = (self._oldest() + starts[:, None] + np.arange(T_len)[None]) % self.capacity
            out = {k: v[idx] for k, v in self.data.items()}
        out["is_first"] = out["is_first"].copy()
        out["is_first"][:, 0] = True   # state before the window is unknown
        out["starts"] = starts
        return out

    def ordered(self, key: str) -> np.ndarray:
        idx = (self._oldest() + np.arange(self.size)) % self.capacity
        return self.data[key][idx]

    def arrays(self) -> dict:
        return {f"replay/{k}": self.ordered(k) for k in self.FIELDS}

    def load_arrays(self, arrays: dict, total_pushed: int) -> None:
        n = len(arrays["replay/reward"])
        if n > self.capacity:
            raise ValueError(f"checkpoint replay holds {n} steps, capacity is {self.capacity}")
        for k in self.FIELDS:
            self.data[k][:n] = arrays[f"replay/{k}"]
        self.size, self.head, self.total_pushed = n, n % self.capacity, total_pushed


def _rng_streams(seed: int) -> dict:
    seqs = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, seqs)}


class Trainer:
    def __init__(self, cfg: RunConfig, out_dir: str | os.PathLike | None = None):
        cfg.validate()
        self.cfg = cfg
        T.set_precision(cfg.trainer.precision)
        self.rngs = _rng_streams(cfg.seed)
        env_seed = int(self.rngs["env"].integers(2 ** 31))
        self.env = PixelEnv(cfg.env, seed=env_seed)
        self.discrete = cfg.env.action_mode == "discrete"
        self.wm = WorldModel(cfg.model, self.env.obs_shape, self.env.action_dim, seed=cfg.seed)
        self.agent = ActorCritic(cfg.agent, self.wm, self.discrete, seed=cfg.seed + 7919)
        m = cfg.model
        self.wm_opt = Adam(self.wm.online_parameters(), m.lr, m.eps, m.clip, m.beta1, m.beta2)
        self.replay = ReplayBuffer(cfg.trainer.capacity, self.env.obs_shape, self.env.action_dim)
        mk = cfg.mask
        self.cube = CuboidSpec(mk.cube_depth, mk.cube_h, mk.cube_w)
        self.env_steps = 0
        self.train_steps = 0
        self.episodes = 0
        self.episode_return = 0.0
        self.last_return = None
        self.need_reset = True
        self.last_obs = None
        self.last_first = True
        self.policy_state = None
        self.incidents = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._metrics_fh = None
        self.model_lock = threading.RLock()

    # ---- collection ----
    def random_action(self, rng: np.random.Generator) -> np.ndarray:
        if self.discrete:
            a = np.zeros(self.env.action_dim, np.float32)
            a[rng.integers(self.env.action_dim)] = 1.0
            return a
        return rng.uniform(-1.0, 1.0, self.env.action_dim).astype(np.float32)

    def _env_action(self, a: np.ndarray):
        return int(np.argmax(a)) if self.discrete else a

    def _policy_action(self) -> np.ndarray:
        if self.policy_state is None:
            self.policy_state = self.agent.initial_state(1)
            first = np.array([True])
        else:
            first = np.array([self.last_first])
        rng = self.rngs["collect"]
        with self.model_lock:
            self.policy_state, a = self.agent.act(self.policy_state, self.last_obs[None], first, rng)
        a = a[0].astype(np.float32)
        eps = self.cfg.trainer.explore_noise
        if eps > 0.0:
            if self.discrete:
                if rng.random() < eps:
                    a = self.random_action(rng)
            else:
                a = np.clip(a + rng.normal(0.0, eps, a.shape), -1.0, 1.0).astype(np.float32)
        return a

    def collect(self, steps: int, random: bool = False, sink=None) -> list:
        """Push ``steps`` records; each reset also counts as one record.

        Returns per-step ``(reward, cont)`` pairs as produced by the env.
        """
        push = sink or self.replay.push
        outputs = []
        for _ in range(steps):
            if self.need_reset:
                obs = self.env.reset()
                push(obs, np.zeros(self.env.action_dim, np.float32), 0.0, 1.0, True)
                self.need_reset = False
                self.last_obs, self.last_first = obs, True
                self.episode_return = 0.0
                outputs.append((0.0, 1.0))
            else:
                a = self.random_action(self.rngs["collect"]) if random else self._policy_action()
                obs, r, c = self.env.step(self._env_action(a))
                push(obs, a, r, c, False)
                self.last_obs, self.last_first = obs, False
                self.episode_return += r
                outputs.append((r, c))
                if self.env.done:
                    self.need_reset = True
                    self.episodes += 1
                    self.last_return = self.episode_return
            self.env_steps += 1
        return outputs

    # ---- updates ----
    def sample_batch(self) -> tuple[dict, np.ndarray]:
        tr, mk = self.cfg.trainer, self.cfg.mask
        batch = self.replay.sample(tr.batch_size, tr.batch_length, self.rngs["replay"])
        masked, _ = mask_batch(batch["obs"], self.cube, mk.mask_ratio, self.rngs["mask"], mk.mask_fill)
        return batch, masked

    def train_step(self) -> dict:
        """World-model update, EMA update, then behaviour learning."""
        batch, masked = self.sample_batch()
        with self.model_lock:
            bd, ro = self.wm.train_step(batch, masked, self.rngs["model"], self.wm_opt)
            self.train_steps += 1
            record = {"step": self.train_steps, "env_steps": self.env_steps}
            record.update(bd.as_dict())
            if bd.extra.get("skipped"):
                self.incidents += 1
                log.warning("train step %d skipped (non-finite loss)", self.train_steps)
            else:
                h0 = ro.h.data.reshape(-1, ro.h.shape[-1])
                z0 = ro.z.data.reshape(-1, ro.z.shape[-1])
                record.update(self.agent.train_step(h0, z0, self.rngs["agent"]))
        record["episodes"] = self.episodes
        record["last_episode_return"] = self.last_return
        record["twohot_clamped"] = self.wm.twohot.clamped
        record["skipped_updates"] = self.wm_opt.skipped
        return record

    # ---- main loop ----
    def run(self, total_env_steps: int | None = None, on_record=None) -> None:
        tr = self.cfg.trainer
        total = tr.total_env_steps if total_env_steps is None else total_env_steps
        if tr.collector_thread:
            return self._run_threaded(total, on_record)
        while self.env_steps < total:
            if self.env_steps < tr.prefill:
                self.collect(min(tr.prefill, total) - self.env_steps, random=True)
                continue
            self.collect(min(tr.train_every, total - self.env_steps))
            self._update_phase(on_record)
        self.finish()

    def _update_phase(self, on_record) -> None:
        tr = self.cfg.trainer
        for _ in range(tr.updates_per_collect):
            rec = self.train_step()
            self._emit(rec, on_record)
        if self.out_dir is not None and self.train_steps // tr.checkpoint_every > \
                (self.train_steps - tr.updates_per_collect) // tr.checkpoint_every:
            self.save_checkpoint(self.out_dir / "checkpoints" / f"step_{self.train_steps:07d}")

    def _run_threaded(self, total: int, on_record) -> None:
        """Collector thread feeding the buffer; no determinism guarantee."""
        tr = self.cfg.trainer
        q: queue.Queue = queue.Queue(maxsize=tr.queue_size)
        stop = threading.Event()
        errors = []

        def worker():
            try:
                while self.env_steps < total and not stop.is_set():
                    random = self.env_steps < tr.prefill
                    self.collect(1, random=random, sink=lambda *rec: q.put(rec))
            except Exception as exc:  # surfaced in the main thread
                errors.append(exc)
            finally:
                q.put(None)

        th = threading.Thread(target=worker, daemon=True)
        th.start()
        consumed, done = 0, False
        while not done:
            rec = q.get()
            if rec is None:
                done = True
            else:
                self.replay.push(*rec)
                consumed += 1
            if consumed >= tr.prefill and (consumed - tr.prefill) % tr.train_every == 0 \
                    and consumed > tr.prefill and rec is not None:
                self._update_phase(on_record)
        stop.set()
        th.join()
        if errors:
            raise errors[0]
        self.finish()

    def _emit(self, rec: dict, on_record) -> None:
        if self.out_dir is not None:
            if self._metrics_fh is None:
                self.out_dir.mkdir(parents=True, exist_ok=True)
                self._metrics_fh = open(self.out_dir / "metrics.jsonl", "a")
            self._metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._metrics_fh.flush()
        if on_record is not None:
            on_record(rec)

    def finish(self) -> None:
        if self.out_dir is not None:
            self.save_checkpoint(self.out_dir / "checkpoints" / "final")
        if self._metrics_fh is not None:
            self._metrics_fh.close()
            self._metrics_fh = None

    # ---- checkpoints ----
    def _named_arrays(self) -> dict:
        arrs = {}
        groups = {"wm": self.wm, "actor": self.agent.actor, "critic": self.agent.critic,
                  "ema_critic": self.agent.ema_critic}
        for g, mod in groups.items():
            for name, p in mod.named_parameters():
                arrs[f"param/{g}.{name}"] = p.data
                if p.requires_grad:
                    arrs[f"adam_m/{g}.{name}"] = p.adam_m
                    arrs[f"adam_v/{g}.{name}"] = p.adam_v
        arrs.update(self.replay.arrays())
        if self.policy_state is not None:
            for k, v in self.policy_state.items():
                arrs[f"policy/{k}"] = v.data
        if self.last_obs is not None:
            arrs["env/last_obs"] = np.asarray(self.last_obs)
        return arrs

    def _step_counts(self) -> dict:
        out = {}
        groups = {"wm": self.wm, "actor": self.agent.actor, "critic": self.agent.critic}
        for g, mod in groups.items():
            for name, p in mod.named_parameters():
                if p.requires_grad:
                    out[f"{g}.{name}"] = p.step_count
        return out

    def _state(self) -> dict:
        return {
            "rngs": {k: g.bit_generator.state for k, g in self.rngs.items()},
            "env": self.env.get_state(),
            "counters": {"env_steps": self.env_steps, "train_steps": self.train_steps,
                         "episodes": self.episodes, "incidents": self.incidents,
                         "replay_total": self.replay.total_pushed,
                         "wm_skipped": self.wm_opt.skipped,
                         "actor_skipped": self.agent.actor_opt.skipped,
                         "critic_skipped": self.agent.critic_opt.skipped,
                         "twohot_clamped": self.wm.twohot.clamped,
                         "agent_twohot_clamped": self.agent.twohot.clamped},
            "episode": {"return": self.episode_return, "last_return": self.last_return,
                        "need_reset": self.need_reset, "last_first": self.last_first},
            "normalizer": self.agent.normalizer.state(),
            "step_counts": self._step_counts(),
        }

    def save_checkpoint(self, path) -> Path:
        save_checkpoint(Path(path), self._named_arrays(), self._state(), self.cfg)
        ckpt_root = Path(path).parent
        steps = sorted(p for p in ckpt_root.glob("step_*") if p.is_dir())
        for old in steps[:-2]:
            shutil.rmtree(old)
        return Path(path)

    def load_checkpoint(self, path) -> None:
        manifest, arrays = load_checkpoint(Path(path))
        if manifest["config_hash"] != self.cfg.digest():
            log.warning("checkpoint config hash %s differs from current %s",
                        manifest["config_hash"], self.cfg.digest())
        expected = self._named_arrays()
        check_shapes(manifest, expected, ignore_prefixes=("replay/", "policy/", "env/"))
        groups = {"wm": self.wm, "actor": self.agent.actor, "critic": self.agent.critic,
                  "ema_critic": self.agent.ema_critic}
        st = manifest["state"]
        for g, mod in groups.items():
            for name, p in mod.named_parameters():
                p.data = arrays[f"param/{g}.{name}"].copy()
                if p.requires_grad:
                    p.adam_m = arrays[f"adam_m/{g}.{name}"].copy()
                    p.adam_v = arrays[f"adam_v/{g}.{name}"].copy()
                    p.step_count = st["step_counts"][f"{g}.{name}"]
        c = st["counters"]
        self.replay.load_arrays(arrays, c["replay_total"])
        for k, g in self.rngs.items():
            g.bit_generator.state = st["rngs"][k]
        self.env.set_state(st["env"])
        self.env_steps, self.train_steps = c["env_steps"], c["train_steps"]
        self.episodes, self.incidents = c["episodes"], c["incidents"]
        self.wm_opt.skipped = c["wm_skipped"]
        self.agent.actor_opt.skipped = c["actor_skipped"]
        self.agent.critic_opt.skipped = c["critic_skipped"]
        self.wm.twohot.clamped = c["twohot_clamped"]
        self.agent.twohot.clamped = c["agent_twohot_clamped"]
        ep = st["episode"]
        self.episode_return, self.last_return = ep["return"], ep["last_return"]
        self.need_reset, self.last_first = ep["need_reset"], ep["last_first"]
        self.agent.normalizer.load(st["normalizer"])
        self.last_obs = arrays.get("env/last_obs")
        if "policy/h" in arrays:
            self.policy_state = {k: Tensor(arrays[f"policy/{k}"].copy()) for k in ("h", "z", "a")}
        else:
            self.policy_state = None


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: Path, arrays: dict, state: dict, cfg: RunConfig) -> None:
    """Directory with ``manifest.json`` and ``payload.bin`` (arrays in sorted name order)."""
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    table, offset = {}, 0
    with open(tmp / "payload.bin", "wb") as fh:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            raw = arr.tobytes()
            table[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape),
                           "offset": offset, "nbytes": len(raw)}
            fh.write(raw)
            offset += len(raw)
    manifest = {"version": CHECKPOINT_VERSION, "config_hash": cfg.digest(),
                "config": cfg.to_text(), "arrays": table, "state": state}
    with open(tmp / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)


def load_checkpoint(path: Path) -> tuple[dict, dict]:
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}")
    raw = (path / "payload.bin").read_bytes()
    arrays = {}
    for name, e in manifest["arrays"].items():
        buf = raw[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[name] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return manifest, arrays


def check_shapes(manifest: dict, expected: dict, ignore_prefixes=()) -> None:
    saved = {k: (tuple(v["shape"]), v["dtype"]) for k, v in manifest["arrays"].items()
             if not k.startswith(ignore_prefixes)}
    want = {k: (tuple(np.shape(v)), np.asarray(v).dtype.str) for k, v in expected.items()
            if not k.startswith(ignore_prefixes)}
    diff = []
    for k in sorted(set(saved) | set(want)):
        a, b = saved.get(k), want.get(k)
        if a != b:
            diff.append(f"  {k}: checkpoint {a} vs model {b}")
    if diff:
        raise CheckpointError("checkpoint does not match the model:\n" + "\n".join(diff))


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def evaluate(trainer: Trainer, episodes: int, seed: int, greedy: bool = True) -> list[float]:
    """Per-episode returns of the trained policy on a fresh env instance."""
    env = PixelEnv(trainer.cfg.env, seed=seed)
    rng = np.random.default_rng(seed)
    agent = trainer.agent
    returns = []
    for _ in range(episodes):
        obs = env.reset()
        state = agent.initial_state(1)
        first, total = True, 0.0
        while not env.done:
            state, a = agent.act(state, obs[None], np.array([first]), rng, greedy)
            obs, r, _ = env.step(trainer._env_action(a[0]))
            total += r
            first = False
        returns.append(total)
    return returns


def summarize_returns(returns) -> dict:
    """Mean, median and interquartile range; ``None`` fields when empty."""
    if len(returns) == 0:
        return {"episodes": 0, "mean": None, "median": None, "iqr": None}
    q1, med, q3 = np.percentile(returns, [25, 50, 75])
    return {"episodes": len(returns), "mean": float(np.mean(returns)), "median": float(med),
            "iqr": float(q3 - q1)}
