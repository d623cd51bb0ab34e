"""Post-training measurements: smoothed loss curves, held-out reward NLL
against a shuffled-target control, and latent sensitivity to exogenous
versus agent-position changes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .envs import EnvConfig, PixelEnv, PixelEnvState
from .tensor import Tensor

SMOOTH_WINDOW = 50


def smoothed(records: list[dict], step: int, key: str = "total",
             window: int = SMOOTH_WINDOW) -> float:
    """Trailing mean of ``key`` over train steps ``(step - window, step]``."""
    vals = [r[key] for r in records if step - window < r["step"] <= step and key in r]
    if not vals:
        raise ValueError(f"no records with {key!r} in steps ({step - window}, {step}]")
    return float(np.mean(vals))


def heldout_episodes(env_cfg: EnvConfig, n_steps: int, seed: int, act_dim: int,
                     discrete: bool = True) -> dict:
    """Random-policy stream of ``n_steps`` records from a fresh env."""
    env = PixelEnv(env_cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    obs, act, rew, cont, first = [], [], [], [], []
    need_reset = True
    for _ in range(n_steps):
        if need_reset:
            o = env.reset()
            a, r, c, f = np.zeros(act_dim), 0.0, 1.0, True
            need_reset = False
        else:
            if discrete:
                a = np.zeros(act_dim)
                a[rng.integers(act_dim)] = 1.0
                o, r, c = env.step(int(np.argmax(a)))
            else:
                a = rng.uniform(-1, 1, act_dim)
                o, r, c = env.step(a)
            f = False
            need_reset = env.done
        obs.append(o)
        act.append(a)
        rew.append(r)
        cont.append(c)
        first.append(f)
    return {"obs": np.stack(obs), "action": np.stack(act), "reward": np.array(rew),
            "cont": np.array(cont), "is_first": np.array(first)}


@dataclass
class RewardProbe:
    nll: float
    shuffled_nll: float
    reward_events: int

    @property
    def improvement(self) -> float:
        """Relative reduction of the NLL versus the shuffled control."""
        return 1.0 - self.nll / self.shuffled_nll


def reward_nll_probe(wm, env_cfg: EnvConfig, seed: int, n_steps: int = 2048,
                     rows: int = 8) -> RewardProbe:
    """Held-out reward NLL of the trained head against the same predictions
    scored on permuted reward targets."""
    discrete = env_cfg.action_mode == "discrete"
    data = heldout_episodes(env_cfg, n_steps, seed, wm.act_dim, discrete)
    Tn = n_steps // rows
    cut = rows * Tn
    seq = {k: v[:cut].reshape(rows, Tn, *v.shape[1:]) for k, v in data.items()}
    seq["is_first"][:, 0] = True
    rng = np.random.default_rng(seed + 2)
    L = wm.cfg.groups
    with T.no_grad():
        ro = wm.rollout(seq["obs"], seq["obs"], seq["action"], seq["is_first"],
                        rng.random((rows, Tn, L)), rng.random((rows, Tn, L)))
        logits = wm.predict_reward(ro.mask_state)
        nll = wm.twohot.nll(logits, seq["reward"]).data
        perm = rng.permutation(cut)
        shuffled = seq["reward"].reshape(-1)[perm].reshape(rows, Tn)
        nll_shuf = wm.twohot.nll(logits, shuffled).data
    live = ~seq["is_first"]
    events = int(np.sum(live & (np.abs(seq["reward"] + env_cfg.step_cost) > 1e-9)))
    return RewardProbe(float(nll.mean()), float(nll_shuf.mean()), events)


def exo_fields(env_cfg: EnvConfig, n: int, seed: int, spacing: int = 16) -> np.ndarray:
    """``n`` exogenous blocks sampled ``spacing`` steps apart from the env's own process."""
    env = PixelEnv(env_cfg, seed=seed)
    env.reset()
    out = []
    for _ in range(n):
        for _ in range(spacing):
            env._advance_exo()
        out.append(env._exo.copy())
    return np.stack(out)


@dataclass
class InvarianceProbe:
    exo_median: float
    agent_median: float

    @property
    def ratio(self) -> float:
        return self.exo_median / max(self.agent_median, 1e-12)


def _cos_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return 1.0 - (a * b).sum(-1) / np.maximum(na * nb, 1e-8)


def invariance_probe(wm, env_cfg: EnvConfig, seed: int, n_pairs: int = 500) -> InvarianceProbe:
    """Median latent cosine distance for frame pairs differing only in the
    exogenous block versus pairs differing only in the agent position."""
    rng = np.random.default_rng(seed)
    env = PixelEnv(env_cfg, seed=seed)
    g = env_cfg.grid
    fields = exo_fields(env_cfg, 2 * n_pairs + n_pairs, seed + 1)

    def cell(exclude=()):
        while True:
            c = (int(rng.integers(g)), int(rng.integers(g)))
            if c not in exclude:
                return c

    exo_a, exo_b, ag_a, ag_b = [], [], [], []
    for k in range(n_pairs):
        target = cell()
        agent = cell((target,))
        s1 = PixelEnvState(agent, target, fields[2 * k])
        s2 = PixelEnvState(agent, target, fields[2 * k + 1])
        exo_a.append(env.render(s1))
        exo_b.append(env.render(s2))
        target = cell()
        a1 = cell((target,))
        a2 = cell((target, a1))
        f = fields[2 * n_pairs + k]
        ag_a.append(env.render(PixelEnvState(a1, target, f)))
        ag_b.append(env.render(PixelEnvState(a2, target, f)))
    lat = wm.frame_latent(np.stack(exo_a + exo_b + ag_a + ag_b))
    n = n_pairs
    d_exo = _cos_dist(lat[:n], lat[n:2 * n])
    d_agent = _cos_dist(lat[2 * n:3 * n], lat[3 * n:])
    return InvarianceProbe(float(np.median(d_exo)), float(np.median(d_agent)))
