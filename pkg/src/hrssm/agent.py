"""Actor-critic trained on trajectories imagined by the world model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import AgentConfig
from .nn import MLP, Adam, Module, frozen
from .tensor import Tensor
from .world_model import TwoHot, WorldModel


def lambda_returns(rewards, continues, values, gamma: float, lam: float):
    """``R_t = r_t + gamma c_t ((1 - lam) v_{t+1} + lam R_{t+1})`` with ``R_H = v_H``.

    ``rewards``/``continues`` have ``H`` entries along axis 0 and ``values``
    has ``H + 1``.  Works on numpy arrays and on Tensors (for backprop).
    """
    H = len(rewards)
    if len(continues) != H or len(values) != H + 1:
        raise ValueError(f"length mismatch: {H} rewards, {len(continues)} continues, "
                         f"{len(values)} values (need H+1)")
    if H == 0:
        return rewards[:0] if not isinstance(rewards, Tensor) else rewards
    out = [None] * H
    nxt = values[H]
    for t in reversed(range(H)):
        nxt = rewards[t] + gamma * continues[t] * ((1 - lam) * values[t + 1] + lam * nxt)
        out[t] = nxt
    if isinstance(out[0], Tensor):
        return T.stack(out, 0)
    return np.stack(out, 0)


class ReturnNormalizer:
    """EMA of the 5th and 95th return percentiles; scale is clamped below at ``limit``."""

    def __init__(self, decay: float = 0.99, limit: float = 1.0):
        self.decay, self.limit = decay, limit
        self.p5 = self.p95 = None

    def update(self, returns: np.ndarray) -> None:
        flat = np.asarray(returns, dtype=np.float64).reshape(-1)
        if flat.size == 0:
            return
        lo, hi = np.percentile(flat, [5, 95])
        if self.p5 is None:
            self.p5, self.p95 = float(lo), float(hi)
        else:
            d = self.decay
            self.p5 = d * self.p5 + (1 - d) * float(lo)
            self.p95 = d * self.p95 + (1 - d) * float(hi)

    @property
    def scale(self) -> float:
        if self.p5 is None:
            return self.limit
        return max(self.limit, self.p95 - self.p5)

    def state(self) -> dict:
        return {"p5": self.p5, "p95": self.p95}

    def load(self, blob: dict) -> None:
        self.p5, self.p95 = blob["p5"], blob["p95"]


@dataclass
class ImaginedTrajectory:
    feats: object        # [H+1, N, F] (ndarray, or Tensor in continuous mode)
    actions: object      # [H, N, A]
    rewards: object      # [H, N]
    continues: object    # [H, N]
    values: object       # [H+1, N]
    weights: np.ndarray  # [H+1, N] cumulative continue products
    truncated_at: int | None = None

    def __len__(self) -> int:
        return len(self.actions)


class Actor(Module):
    def __init__(self, rng, n_in: int, hidden: int, act_dim: int, discrete: bool, unimix: float):
        self.discrete = discrete
        self.act_dim = act_dim
        self.unimix = unimix
        self.net = MLP(rng, n_in, hidden, act_dim if discrete else 2 * act_dim, layers=2)

    def dist(self, feat):
        """Discrete: mixed probabilities.  Continuous: (mean, std)."""
        out = self.net(feat)
        if self.discrete:
            return T.mixed_probs(out, self.unimix)
        A = self.act_dim
        mean = T.tanh(out[..., :A])
        std = 0.9 * T.sigmoid(out[..., A:] + 2.0) + 0.1
        return mean, std

    def sample(self, feat, rng: np.random.Generator, greedy: bool = False):
        d = self.dist(feat)
        if self.discrete:
            p = d.data
            if greedy:
                idx = p.argmax(-1)
                out = np.zeros_like(p)
                np.put_along_axis(out, idx[..., None], 1.0, -1)
                return Tensor(out)
            return T.Tensor(T.sample_one_hot(p, rng.random(p.shape[:-1])))
        mean, std = d
        if greedy:
            return mean
        noise = rng.standard_normal(mean.shape).astype(mean.data.dtype)
        return mean + std * noise

    def entropy(self, d) -> Tensor:
        if self.discrete:
            return -T.sum_(d * T.log(d), axis=-1)
        _, std = d
        return T.sum_(T.log(std), axis=-1) + 0.5 * self.act_dim * (1.0 + np.log(2 * np.pi))


class Critic(Module):
    def __init__(self, rng, n_in: int, hidden: int, bins: int):
        self.net = MLP(rng, n_in, hidden, bins, layers=2, zero_out=True)

    def __call__(self, feat) -> Tensor:
        return self.net(feat)


class ActorCritic:
    def __init__(self, cfg: AgentConfig, wm: WorldModel, discrete: bool, seed: int = 0):
        self.cfg = cfg
        self.wm = wm
        self.discrete = discrete
        rng = np.random.default_rng(seed)
        F = wm.feat_dim
        self.actor = Actor(rng, F, cfg.hidden, wm.act_dim, discrete, cfg.actor_unimix)
        self.critic = Critic(rng, F, cfg.hidden, wm.cfg.bins)
        self.ema_critic = Critic(rng, F, cfg.hidden, wm.cfg.bins)
        for (_, on), (_, em) in zip(self.critic.named_parameters(),
                                    self.ema_critic.named_parameters()):
            em.data = on.data.copy()
            em.requires_grad = False
        self.twohot = TwoHot(wm.cfg.bins, wm.cfg.bin_low, wm.cfg.bin_high)
        self.normalizer = ReturnNormalizer(cfg.return_decay, cfg.return_limit)
        self.actor_opt = Adam(self.actor.parameters(), cfg.lr, cfg.eps, cfg.clip)
        self.critic_opt = Adam(self.critic.parameters(), cfg.lr, cfg.eps, cfg.clip)

    # ---- value helpers ----
    def value(self, feat, critic: Critic | None = None):
        critic = critic or self.critic
        with T.no_grad():
            return self.twohot.decode(critic(feat).data)

    def ema_critic_update(self) -> None:
        d = self.cfg.critic_ema_decay
        for (_, on), (_, em) in zip(self.critic.named_parameters(),
                                    self.ema_critic.named_parameters()):
            em.data = (d * em.data + (1 - d) * on.data).astype(em.data.dtype)

    # ---- imagination ----
    def imagine(self, h0: np.ndarray, z0: np.ndarray, horizon: int,
                rng: np.random.Generator) -> ImaginedTrajectory:
        """Roll the mask-branch prior forward from detached posterior states."""
        wm, L = self.wm, self.wm.cfg.groups
        N = len(h0)
        if self.discrete:
            return self._imagine_discrete(h0, z0, horizon, rng)
        h, z = Tensor(h0), Tensor(z0)
        feats, acts = [wm.features(h, z)], []
        for _ in range(horizon):
            a = self.actor.sample(feats[-1], rng)
            h, z, _ = wm.img_step(h, z, a, rng.random((N, L)))
            feats.append(wm.features(h, z))
            acts.append(a)
        F = T.stack(feats, 0)
        rewards = self._decode_tensor(wm.predict_reward(F[1:])) if horizon else F[1:, :, 0]
        cont = T.sigmoid(wm.predict_cont(F[1:])) if horizon else F[1:, :, 0]
        values = self._decode_tensor(self.critic(F))
        weights = self._weights(cont.data)
        return ImaginedTrajectory(F, T.stack(acts, 0) if acts else None, rewards, cont,
                                  values, weights)

    def _imagine_discrete(self, h0, z0, horizon, rng) -> ImaginedTrajectory:
        wm, L = self.wm, self.wm.cfg.groups
        N = len(h0)
        truncated = None
        with T.no_grad():
            h, z = Tensor(h0), Tensor(z0)
            feats, acts = [wm.features(h, z).data], []
            for k in range(horizon):
                a = self.actor.sample(Tensor(feats[-1]), rng)
                h, z, _ = wm.img_step(h, z, a, rng.random((N, L)))
                f = wm.features(h, z).data
                if not np.all(np.isfinite(f)):
                    truncated = k
                    break
                feats.append(f)
                acts.append(a.data)
            F = np.stack(feats, 0)
            H = len(acts)
            A = np.stack(acts, 0) if acts else np.zeros((0, N, wm.act_dim))
            if H:
                rewards = wm.twohot.decode(wm.predict_reward(Tensor(F[1:])).data)
                cont = T.sigmoid(wm.predict_cont(Tensor(F[1:]))).data
            else:
                rewards = cont = np.zeros((0, N))
            values = self.twohot.decode(self.critic(Tensor(F)).data)
        return ImaginedTrajectory(F, A, rewards, cont, values, self._weights(cont), truncated)

    def _decode_tensor(self, logits: Tensor) -> Tensor:
        # differentiable expectation in symlog space, then symexp
        p = T.softmax(logits, -1)
        y = T.sum_(p * self.twohot.bins.astype(logits.data.dtype), axis=-1)
        return _symexp_t(y)

    @staticmethod
    def _weights(cont: np.ndarray) -> np.ndarray:
        N = cont.shape[1] if cont.ndim > 1 else 0
        first = np.ones((1, N))
        return np.concatenate([first, np.cumprod(cont, 0)], 0)

    # ---- losses ----
    def critic_loss(self, traj: ImaginedTrajectory, returns: np.ndarray) -> Tensor:
        feats = traj.feats.data if isinstance(traj.feats, Tensor) else traj.feats
        H = len(returns)
        x = Tensor(feats[:H])
        logits = self.critic(x)
        w = traj.weights[:H]
        nll = self.twohot.nll(logits, returns)
        loss = nll
        if self.cfg.critic_ema_reg:
            ema_v = self.value(x, self.ema_critic)
            loss = loss + self.cfg.critic_ema_reg * self.twohot.nll(logits, ema_v)
        return T.mean(loss * w)

    def actor_loss(self, traj: ImaginedTrajectory, returns, values) -> tuple[Tensor, dict]:
        cfg = self.cfg
        H = len(traj)
        w = traj.weights[:H]
        scale = self.normalizer.scale
        if self.discrete:
            d = self.actor.dist(Tensor(traj.feats[:H]))
            logp = T.sum_(T.log(d) * traj.actions, axis=-1)
            adv = (np.asarray(returns) - np.asarray(values[:H])) / scale
            ent = self.actor.entropy(d)
            obj = logp * adv + cfg.entropy_scale * ent
        else:
            ent = self.actor.entropy(self.actor.dist(traj.feats[:H]))
            obj = returns * (1.0 / scale) + cfg.entropy_scale * ent
        loss = -T.mean(obj * w)
        return loss, {"entropy": float(ent.data.mean()) if ent.size else 0.0}

    def train_step(self, h0: np.ndarray, z0: np.ndarray, rng: np.random.Generator) -> dict:
        cfg = self.cfg
        wm_params = self.wm.parameters()
        if self.discrete:
            traj = self.imagine(h0, z0, cfg.horizon, rng)
            if len(traj) == 0:
                return {}
            returns = lambda_returns(traj.rewards, traj.continues, traj.values,
                                     cfg.discount, cfg.lam)
            self.normalizer.update(returns)
            a_loss, info = self.actor_loss(traj, returns, traj.values)
        else:
            with frozen(wm_params + self.critic.parameters()):
                traj = self.imagine(h0, z0, cfg.horizon, rng)
                if len(traj) == 0:
                    return {}
                returns_t = lambda_returns(traj.rewards, traj.continues, traj.values,
                                           cfg.discount, cfg.lam)
                self.normalizer.update(returns_t.data)
                a_loss, info = self.actor_loss(traj, returns_t, traj.values.data)
            returns = returns_t.data
        a_loss.backward()
        for p in wm_params:      # world model is updated only by its own loss
            p.grad = None
        actor_norm = self.actor_opt.step()
        c_loss = self.critic_loss(traj, returns)
        c_loss.backward()
        critic_norm = self.critic_opt.step()
        self.ema_critic_update()
        vals = traj.values.data if isinstance(traj.values, Tensor) else traj.values
        return {
            "actor_loss": float(a_loss.data), "critic_loss": float(c_loss.data),
            "return_mean": float(np.mean(returns)), "value_mean": float(np.mean(vals)),
            "return_scale": self.normalizer.scale, "actor_entropy": info["entropy"],
            "actor_grad_norm": actor_norm, "critic_grad_norm": critic_norm,
        }

    # ---- acting ----
    def act(self, state: dict, obs: np.ndarray, first: np.ndarray, rng, greedy=False):
        """Filter one observation per env and pick actions; ``state`` holds h, z, a."""
        wm = self.wm
        dt = T.get_dtype()
        N = len(obs)
        with T.no_grad():
            e = wm.mask.encoder(obs.reshape(N, -1).astype(dt))
            h, z, _ = wm.posterior_step(state["h"], state["z"], state["a"], first, e,
                                        rng.random((N, wm.cfg.groups)))
            a = self.actor.sample(wm.features(h, z), rng, greedy)
        return {"h": h, "z": z, "a": Tensor(a.data)}, a.data

    def initial_state(self, n: int) -> dict:
        h, z = self.wm.initial(n)
        return {"h": h, "z": z, "a": Tensor(np.zeros((n, self.wm.act_dim), T.get_dtype()))}


def _symexp_t(y: Tensor) -> Tensor:
    # sign(y) * (exp(|y|) - 1), differentiable away from 0
    sign = np.sign(y.data)
    return (T.exp(T.abs_(y)) - 1.0) * sign
