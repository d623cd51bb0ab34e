"""Hybrid RSSM: a gradient-trained mask branch over masked frames and an
EMA twin over raw frames, sharing the mask branch's recurrent state.

Only the mask branch, the projection and the reward/continue heads
receive gradients.  The raw branch is evaluated without a tape and acts as
the target of the latent reconstruction and similarity losses.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import MLP, GRUCell, Linear, Module, NormLayer, Parameter
from .tensor import Tensor

log = logging.getLogger(__name__)


# ---- symlog two-hot regression ----------------------------------------------
def symlog(x):
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(x):
    return np.sign(x) * np.expm1(np.abs(x))


class TwoHot:
    """Fixed bins uniform in symlog space."""

    def __init__(self, n_bins: int = 41, low: float = -10.0, high: float = 10.0):
        self.bins = np.linspace(low, high, n_bins)
        self.low, self.high = low, high
        self.clamped = 0

    def encode(self, values: np.ndarray) -> np.ndarray:
        y = symlog(np.asarray(values, dtype=np.float64))
        out_of_range = (y < self.low) | (y > self.high)
        if np.any(out_of_range):
            self.clamped += int(out_of_range.sum())
            y = np.clip(y, self.low, self.high)
        n = len(self.bins)
        step = (self.high - self.low) / (n - 1)
        pos = (y - self.low) / step
        lo = np.clip(np.floor(pos).astype(int), 0, n - 2)
        w_hi = np.clip(pos - lo, 0.0, 1.0)
        out = np.zeros(y.shape + (n,))
        np.put_along_axis(out, lo[..., None], (1.0 - w_hi)[..., None], -1)
        np.put_along_axis(out, lo[..., None] + 1, w_hi[..., None], -1)
        return out

    def nll(self, logits: Tensor, values: np.ndarray) -> Tensor:
        """Per-element negative log-likelihood, shape ``logits.shape[:-1]``."""
        target = self.encode(values).astype(logits.data.dtype)
        return -T.sum_(T.log_softmax(logits, -1) * target, axis=-1)

    def decode(self, logits: np.ndarray) -> np.ndarray:
        z = logits - logits.max(-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(-1, keepdims=True)
        return symexp(p @ self.bins)


# ---- losses -----------------------------------------------------------------
def categorical_kl(logits_a, logits_b, unimix: float) -> Tensor:
    """KL[a || b] per row, summed over latent groups.  Inputs ``[..., L, C]``."""
    pa = T.mixed_probs(logits_a, unimix)
    pb = T.mixed_probs(logits_b, unimix)
    kl = T.sum_(pa * (T.log(pa) - T.log(pb)), axis=-1)
    return T.sum_(kl, axis=-1)


def dyn_loss(post_logits, prior_logits, unimix: float = 0.01, free_nats: float = 1.0,
             beta_dyn: float = 0.5, beta_rep: float = 0.1, post_sg=None,
             prior_sg=None) -> tuple[Tensor, dict]:
    """Free-bits KL balance over ``[..., L, C]`` logits, mean over leading axes.

    ``post_sg``/``prior_sg`` optionally replace the stop-gradient copies
    (used by the finite-difference audit to hold them fixed).
    """
    post, prior = T.as_tensor(post_logits), T.as_tensor(prior_logits)
    post_c = post.detach() if post_sg is None else Tensor(post_sg)
    prior_c = prior.detach() if prior_sg is None else Tensor(prior_sg)
    kl_dyn = categorical_kl(post_c, prior, unimix)     # trains the prior
    kl_rep = categorical_kl(post, prior_c, unimix)     # trains the posterior
    if not (np.all(np.isfinite(kl_dyn.data)) and np.all(np.isfinite(kl_rep.data))):
        raise FloatingPointError("non-finite KL in dynamics loss")
    floor = np.asarray(free_nats, dtype=kl_dyn.data.dtype)
    loss = beta_dyn * T.mean(T.maximum(kl_dyn, floor)) + beta_rep * T.mean(T.maximum(kl_rep, floor))
    return loss, {"kl": float(kl_rep.data.mean()) if kl_rep.size else 0.0}


def latent_rec_loss(raw_state, mask_state, projection: Linear, target=None) -> Tensor:
    """MSE between l2-normalised projections; the raw side is a constant.

    The squared error is averaged over projection coordinates, so unit
    vectors ``u`` and ``-u`` give ``4 / dim``.
    """
    if target is None:
        with T.no_grad():
            target = T.l2_normalize(projection(T.as_tensor(raw_state).detach())).data
    pred = T.l2_normalize(projection(mask_state))
    diff = pred - target
    return T.mean(diff * diff)


def cosine_distance_rows(a: Tensor, b) -> Tensor:
    """1 - cos over the last axis."""
    an = T.l2_normalize(a)
    bn = T.l2_normalize(b)
    return 1.0 - T.sum_(an * bn, axis=-1)


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise ValueError("a derangement needs at least two rows")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def sim_loss(cur_a, cur_b, r_a, r_b, next_a, next_b, gamma: float, weights=None,
             target=None) -> Tensor:
    """Squared bisimulation residual for aligned pairs (a_k, b_k).

    ``cur_*`` / ``next_*`` are already-projected vectors ``[N, D]``; the
    target ``|r_a - r_b| + gamma * d(next_a, next_b)`` carries no gradient.
    """
    cur_a, cur_b = T.as_tensor(cur_a), T.as_tensor(cur_b)
    if not (len(cur_a.data) == len(cur_b.data) == len(r_a) == len(r_b)
            == len(np.asarray(next_a.data if isinstance(next_a, Tensor) else next_a))):
        raise ValueError("sim_loss pairing lengths disagree")
    if target is None:
        target = sim_target(r_a, r_b, next_a, next_b, gamma)
    d = cosine_distance_rows(cur_a, cur_b)
    err = d - target.astype(d.data.dtype)
    sq = err * err
    if weights is None:
        return T.mean(sq)
    w = np.asarray(weights, dtype=d.data.dtype)
    return T.sum_(sq * w) / max(float(w.sum()), 1.0)


def sim_target(r_a, r_b, next_a, next_b, gamma: float) -> np.ndarray:
    with T.no_grad():
        nd = cosine_distance_rows(T.as_tensor(next_a).detach(), T.as_tensor(next_b).detach())
    return np.abs(np.asarray(r_a) - np.asarray(r_b)) + gamma * nd.data


def pred_loss(reward_logits, cont_logit, reward, cont, twohot: TwoHot) -> tuple[Tensor, Tensor]:
    """Two-hot symlog reward NLL and continue-flag BCE, each averaged."""
    r_nll = T.mean(twohot.nll(reward_logits, reward))
    c = np.asarray(cont, dtype=T.as_tensor(cont_logit).data.dtype)
    bce = T.softplus(cont_logit) - cont_logit * c
    return r_nll, T.mean(bce)


# ---- networks ---------------------------------------------------------------
class Encoder(Module):
    """Per-frame MLP over the flattened image."""

    def __init__(self, rng, n_in: int, embed: int):
        self.l1 = NormLayer(rng, n_in, embed)
        self.l2 = NormLayer(rng, embed, embed)

    def __call__(self, x):
        return self.l2(self.l1(x))


class Branch(Module):
    """Encoder, posterior, recurrent model and prior of one RSSM branch."""

    def __init__(self, rng, cfg: ModelConfig, obs_dim: int, act_dim: int):
        stoch = cfg.groups * cfg.classes
        self.encoder = Encoder(rng, obs_dim, cfg.embed)
        self.posterior = MLP(rng, cfg.deter + cfg.embed, cfg.hidden, stoch, layers=1)
        self.recurrent = GRUCell(rng, stoch + act_dim, cfg.deter)
        self.prior = MLP(rng, cfg.deter, cfg.hidden, stoch, layers=1)


@dataclass
class Rollout:
    """Per-timestep tensors of one batch, all shaped ``[B, T, ...]``."""

    h: Tensor                  # mask-branch recurrent state (grad)
    z: Tensor                  # mask posterior sample, flattened L*C (grad)
    post_logits: Tensor        # [B, T, L, C]
    prior_logits: Tensor
    z_prior: Tensor            # mask prior sample
    raw_z: np.ndarray          # raw posterior sample
    raw_post_logits: np.ndarray
    raw_h: np.ndarray          # raw recurrent state
    raw_prior_logits: np.ndarray
    raw_z_prior: np.ndarray

    @property
    def mask_state(self) -> Tensor:
        return T.concat([self.h, self.z], -1)

    @property
    def raw_state(self) -> Tensor:
        return T.concat([self.h, T.Tensor(self.raw_z)], -1)


@dataclass
class LossBreakdown:
    total: float = 0.0
    dyn: float = 0.0
    rec: float = 0.0
    sim: float = 0.0
    pred: float = 0.0
    reward_nll: float = 0.0
    cont_bce: float = 0.0
    kl: float = 0.0
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("total", "dyn", "rec", "sim", "pred", "reward_nll", "cont_bce", "kl")}
        d.update(self.extra)
        return d


class WorldModel(Module):
    def __init__(self, cfg: ModelConfig, obs_shape: tuple, act_dim: int, seed: int = 0):
        self.cfg = cfg
        self.obs_shape = tuple(obs_shape)
        self.obs_dim = int(np.prod(obs_shape))
        self.act_dim = act_dim
        self.stoch = cfg.groups * cfg.classes
        self.feat_dim = cfg.deter + self.stoch
        rng = np.random.default_rng(seed)
        self.mask = Branch(rng, cfg, self.obs_dim, act_dim)
        self.projection = Linear(rng, self.feat_dim, cfg.proj, bias=False)
        head_in = cfg.proj if cfg.predictor_input == "normalized" else self.feat_dim
        self.reward_head = MLP(rng, head_in, cfg.hidden, cfg.bins, layers=2, zero_out=True)
        self.cont_head = MLP(rng, head_in, cfg.hidden, 1, layers=2)
        # EMA twin: same architecture, never on the tape
        self.ema = Branch(np.random.default_rng(seed + 1), cfg, self.obs_dim, act_dim)
        self.copy_to_ema()
        self.twohot = TwoHot(cfg.bins, cfg.bin_low, cfg.bin_high)

    # ---- parameter groups ----
    def online_parameters(self) -> list[Parameter]:
        return [p for n, p in self.named_parameters() if not n.startswith("ema.")]

    def ema_pairs(self) -> list[tuple[Parameter, Parameter]]:
        online = dict(self.mask.named_parameters())
        ema = dict(self.ema.named_parameters())
        if online.keys() != ema.keys():
            raise ValueError("EMA twin does not mirror the online branch")
        pairs = []
        for k in online:
            if online[k].shape != ema[k].shape:
                raise ValueError(f"EMA shape mismatch at {k}: {online[k].shape} vs {ema[k].shape}")
            pairs.append((online[k], ema[k]))
        return pairs

    def copy_to_ema(self) -> None:
        for on, em in self.ema_pairs():
            em.data = on.data.copy()
            em.requires_grad = False

    def ema_update(self, m: float | None = None) -> float:
        """ema <- m * online + (1 - m) * ema; returns the L2 drift of the EMA weights."""
        m = self.cfg.ema_m if m is None else m
        drift = 0.0
        for on, em in self.ema_pairs():
            new = (m * on.data + (1.0 - m) * em.data).astype(em.data.dtype)
            drift += float(np.sum((new - em.data) ** 2))
            em.data = new
        return float(np.sqrt(drift))

    # ---- latent helpers ----
    def _latent(self, logits: Tensor, uniform: np.ndarray) -> Tensor:
        if self.cfg.latent_mode == "probs":
            return T.mixed_probs(logits, self.cfg.unimix)
        return T.categorical_straight_through(logits, unimix=self.cfg.unimix, uniform=uniform)

    def _logits(self, mlp: MLP, x) -> Tensor:
        out = mlp(x)
        return T.reshape(out, out.shape[:-1] + (self.cfg.groups, self.cfg.classes))

    def _flat(self, z: Tensor) -> Tensor:
        return T.reshape(z, z.shape[:-2] + (self.stoch,))

    def img_step(self, h, z_flat, action, uniform, branch: Branch | None = None):
        """One prior step: returns (h', z' flattened, prior logits)."""
        branch = branch or self.mask
        h2 = branch.recurrent(h, T.concat([z_flat, action], -1))
        logits = self._logits(branch.prior, h2)
        return h2, self._flat(self._latent(logits, uniform)), logits

    def posterior_step(self, h, z_prev, a_prev, first, embed, u_post):
        """Filter one observation on the mask branch (used when acting)."""
        keep = (1.0 - np.asarray(first, dtype=np.float64))[:, None]
        h = self.mask.recurrent(h * keep, T.concat([z_prev * keep, a_prev * keep], -1))
        logits = self._logits(self.mask.posterior, T.concat([h, embed], -1))
        return h, self._flat(self._latent(logits, u_post)), logits

    def initial(self, batch: int):
        dt = T.get_dtype()
        return (Tensor(np.zeros((batch, self.cfg.deter), dt)),
                Tensor(np.zeros((batch, self.stoch), dt)))

    def features(self, h, z) -> Tensor:
        return T.concat([h, z], -1)

    def head_input(self, feat):
        if self.cfg.predictor_input == "normalized":
            return T.l2_normalize(self.projection(feat))
        return feat

    def predict_reward(self, feat) -> Tensor:
        return self.reward_head(self.head_input(feat))

    def predict_cont(self, feat) -> Tensor:
        out = self.cont_head(self.head_input(feat))
        return T.reshape(out, out.shape[:-1])

    # ---- rollout ----
    def rollout(self, obs, masked_obs, actions, is_first, u_post, u_prior) -> Rollout:
        """Run both branches over ``[B, T, ...]`` sequences.

        ``actions[:, t]`` is the action taken *before* ``obs[:, t]``;
        ``is_first`` resets state and action to zero.
        """
        obs = np.asarray(obs)
        B, Tn = obs.shape[:2]
        if actions.shape[:2] != (B, Tn) or masked_obs.shape[:2] != (B, Tn) \
                or is_first.shape != (B, Tn):
            raise ValueError(f"sequence shapes disagree: obs {obs.shape[:2]}, actions "
                             f"{actions.shape[:2]}, masked {masked_obs.shape[:2]}, "
                             f"is_first {is_first.shape}")
        cfg, L, C = self.cfg, self.cfg.groups, self.cfg.classes
        dt = T.get_dtype()
        if Tn == 0:
            e = np.zeros((B, 0, cfg.deter), dt)
            z = np.zeros((B, 0, self.stoch), dt)
            lg = np.zeros((B, 0, L, C), dt)
            return Rollout(Tensor(e), Tensor(z), Tensor(lg), Tensor(lg), Tensor(z),
                           z, lg, e, lg, z)
        embed_m = self.mask.encoder(masked_obs.reshape(B, Tn, -1).astype(dt))
        with T.no_grad():
            embed_r = self.ema.encoder(obs.reshape(B, Tn, -1).astype(dt)).data
        keep = (1.0 - is_first.astype(dt))[..., None]
        acts = actions.astype(dt) * keep
        h, z = self.initial(B)
        raw_z_prev = np.zeros((B, self.stoch), dt)
        hs, zs, post = [], [], []
        raw_zs, raw_post = [], []
        for t in range(Tn):
            k = keep[:, t]
            h = self.mask.recurrent(h * k, T.concat([z * k, acts[:, t]], -1))
            logits = self._logits(self.mask.posterior, T.concat([h, embed_m[:, t]], -1))
            z = self._flat(self._latent(logits, u_post[:, t]))
            with T.no_grad():
                rlog = self._logits(self.ema.posterior,
                                    T.concat([Tensor(h.data), Tensor(embed_r[:, t])], -1))
                rz = self._flat(self._latent(rlog, u_post[:, t])).data
            hs.append(h)
            zs.append(z)
            post.append(logits)
            raw_zs.append(rz)
            raw_post.append(rlog.data)
        H = T.stack(hs, 1)
        Z = T.stack(zs, 1)
        P = T.stack(post, 1)
        prior_logits = self._logits(self.mask.prior, H)
        z_prior = self._flat(self._latent(prior_logits, u_prior))
        raw_z = np.stack(raw_zs, 1)
        with T.no_grad():
            # raw recurrent step reads the shared mask state and the raw sample
            h_prev = np.concatenate([np.zeros((B, 1, cfg.deter), dt), H.data[:, :-1]], 1) * keep
            z_prev = np.concatenate([np.zeros((B, 1, self.stoch), dt), raw_z[:, :-1]], 1) * keep
            raw_h = self.ema.recurrent(Tensor(h_prev), T.concat([Tensor(z_prev), Tensor(acts)], -1))
            raw_prior = self._logits(self.ema.prior, raw_h)
            raw_z_prior = self._flat(self._latent(raw_prior, u_prior)).data
        return Rollout(H, Z, P, prior_logits, z_prior, raw_z, np.stack(raw_post, 1),
                       raw_h.data, raw_prior.data, raw_z_prior)

    # ---- losses ----
    def noise(self, rng: np.random.Generator, B: int, Tn: int):
        L = self.cfg.groups
        return rng.random((B, Tn, L)), rng.random((B, Tn, L)), [
            derangement(B, rng) for _ in range(max(Tn - 1, 0))]

    def loss_terms(self, batch: dict, masked_obs: np.ndarray, rng: np.random.Generator | None,
                   noise=None, frozen: dict | None = None) -> tuple[dict, dict, Rollout]:
        """The four loss tensors (plus the two parts of the prediction loss).

        Every stop-gradient quantity is recorded in ``info["detached"]``;
        passing that dict back as ``frozen`` pins those quantities, which is
        what a finite-difference oracle of a stop-gradient loss must do.
        """
        obs, actions = batch["obs"], batch["action"]
        B, Tn = obs.shape[:2]
        u_post, u_prior, perms = noise if noise is not None else self.noise(rng, B, Tn)
        ro = self.rollout(obs, masked_obs, actions, batch["is_first"], u_post, u_prior)
        cfg = self.cfg
        fz = frozen or {}
        if "raw_z" in fz:
            ro.raw_z = fz["raw_z"]
        det = {"post_sg": fz.get("post_sg", ro.post_logits.data),
               "prior_sg": fz.get("prior_sg", ro.prior_logits.data), "raw_z": ro.raw_z}
        l_dyn, info = dyn_loss(ro.post_logits, ro.prior_logits, cfg.unimix, cfg.free_nats,
                               cfg.beta_dyn, cfg.beta_rep, det["post_sg"], det["prior_sg"])
        mask_state = ro.mask_state
        if "rec_target" in fz:
            det["rec_target"] = fz["rec_target"]
        else:
            with T.no_grad():
                det["rec_target"] = T.l2_normalize(self.projection(ro.raw_state.detach())).data
        l_rec = latent_rec_loss(None, mask_state, self.projection, det["rec_target"])
        l_sim, det["sim_target"] = self._sim_term(ro, batch, perms, fz.get("sim_target"))
        info["detached"] = det
        r_nll, c_bce = pred_loss(self.predict_reward(mask_state), self.predict_cont(mask_state),
                                 batch["reward"], batch["cont"], self.twohot)
        terms = {"dyn": l_dyn, "rec": l_rec, "sim": l_sim, "pred": r_nll + c_bce,
                 "reward_nll": r_nll, "cont_bce": c_bce}
        return terms, info, ro

    def total_loss(self, batch: dict, masked_obs: np.ndarray, rng: np.random.Generator | None,
                   noise=None) -> tuple[Tensor, LossBreakdown, Rollout]:
        """Unit-weighted sum of the dynamics, reconstruction, similarity and
        prediction losses, each averaged over batch and time."""
        terms, info, ro = self.loss_terms(batch, masked_obs, rng, noise)
        total = terms["dyn"] + terms["rec"] + terms["sim"] + terms["pred"]
        f = {k: float(v.data) for k, v in terms.items()}
        bd = LossBreakdown(float(total.data), f["dyn"], f["rec"], f["sim"], f["pred"],
                           f["reward_nll"], f["cont_bce"], info["kl"])
        return total, bd, ro

    def _sim_term(self, ro: Rollout, batch: dict, perms, target=None) -> tuple[Tensor, np.ndarray]:
        B, Tn = batch["obs"].shape[:2]
        if Tn < 2:
            return Tensor(np.zeros((), T.get_dtype())), np.zeros(0)
        idx = np.arange(B)
        j = np.stack(perms, 0)                      # [T-1, B]
        t = np.arange(Tn - 1)[:, None]
        i = np.broadcast_to(idx, j.shape)
        reward = batch["reward"]
        first_next = batch["is_first"][:, 1:].T     # [T-1, B]
        weights = (1.0 - first_next[t, i]) * (1.0 - first_next[t, j])
        h, raw_z = ro.h, Tensor(ro.raw_z)
        proj = self.projection
        mask_cur = proj(T.concat([h, ro.z], -1))
        mask_next = np.concatenate([ro.h.data, ro.z_prior.data], -1)
        raw_next = np.concatenate([ro.raw_h, ro.raw_z_prior], -1)
        with T.no_grad():
            mask_next = proj(Tensor(mask_next)).data
            raw_next = proj(Tensor(raw_next)).data
        if self.cfg.sim_loss_variant == "cross":
            raw_cur = proj(T.concat([h, raw_z], -1))
            cur_a = T.getitem(raw_cur, (i, t))
            nxt_a, nxt_b = raw_next[i, t + 1], mask_next[j, t + 1]
        else:
            cur_a = T.getitem(mask_cur, (i, t))
            nxt_a, nxt_b = raw_next[i, t + 1], raw_next[j, t + 1]
        cur_b = T.getitem(mask_cur, (j, t))
        D = cur_a.shape[-1]
        n = i.size
        r_a, r_b = reward[i, t + 1].reshape(n), reward[j, t + 1].reshape(n)
        if target is None:
            target = sim_target(r_a, r_b, nxt_a.reshape(n, D), nxt_b.reshape(n, D),
                                self.cfg.sim_gamma)
        loss = sim_loss(T.reshape(cur_a, (n, D)), T.reshape(cur_b, (n, D)), r_a, r_b,
                        nxt_a.reshape(n, D), nxt_b.reshape(n, D), self.cfg.sim_gamma,
                        weights.reshape(n), target)
        return loss, target

    # ---- single-frame embedding used by probes ----
    def frame_latent(self, frames: np.ndarray) -> np.ndarray:
        """Projected, deterministic latent of isolated frames ``[N, H, W, C]``."""
        dt = T.get_dtype()
        N = len(frames)
        with T.no_grad():
            h, z = self.initial(N)
            a = Tensor(np.zeros((N, self.act_dim), dt))
            h = self.mask.recurrent(h, T.concat([z, a], -1))
            e = self.mask.encoder(frames.reshape(N, -1).astype(dt))
            logits = self._logits(self.mask.posterior, T.concat([h, e], -1))
            z = self._flat(T.mixed_probs(logits, self.cfg.unimix))
            return self.projection(T.concat([h, z], -1)).data

    def train_step(self, batch: dict, masked_obs: np.ndarray, rng, opt) -> tuple[LossBreakdown, Rollout]:
        total, bd, ro = self.total_loss(batch, masked_obs, rng)
        if not np.isfinite(bd.total):
            log.warning("non-finite world-model loss; update skipped")
            for p in self.online_parameters():
                p.grad = None
            bd.extra["skipped"] = 1
            return bd, ro
        total.backward()
        bd.extra["wm_grad_norm"] = opt.step()
        bd.extra["ema_drift"] = self.ema_update()
        return bd, ro
