"""Finite-difference audit of the tape: every differentiable operation,
each world-model loss term end to end, and the gradient firewalls."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .masking import CuboidSpec, mask_batch
from .nn import MLP, GRUCell, Parameter
from .tensor import Tensor
from .world_model import (TwoHot, WorldModel, categorical_kl, dyn_loss, latent_rec_loss,
                          sim_loss)

TOL = 1e-4
OP_STEP = 1e-5
# end-to-end losses pass through layer norms of near-constant rows (state
# resets), where curvature is high; a smaller step keeps truncation error
# well below the tolerance
LOSS_STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    error: float
    passed: bool
    note: str = ""


def _check_inputs(f, inputs: list[np.ndarray]) -> float:
    """Max relative error of tape vs central differences over all inputs of ``f``."""
    ts = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = f(*ts)
    out.backward()
    worst = 0.0
    for k, x in enumerate(inputs):
        def scalar(v, k=k):
            args = [Tensor(v) if i == k else Tensor(inputs[i]) for i in range(len(inputs))]
            with T.no_grad():
                return float(f(*args).data)
        fd = T.finite_difference_gradient(scalar, x, step=OP_STEP)
        tape = ts[k].grad if ts[k].grad is not None else np.zeros_like(x)
        worst = max(worst, T.relative_error(tape, fd))
    return worst


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (scalar function of tensors, list of input arrays)."""
    def u(*shape, lo=-2.0, hi=2.0):
        return rng.uniform(lo, hi, shape)

    def away_from_zero(*shape):
        x = rng.uniform(0.5, 2.0, shape)
        return x * rng.choice([-1.0, 1.0], shape)

    w = u(3, 4)  # fixed random weights to make reductions non-trivial
    w5 = u(2, 5)
    w6, w234 = u(3, 6), u(2, 3, 4)
    gain, bias = u(4), u(4)
    cases = {
        "add": (lambda a, b: T.sum_(T.add(a, b) * w), [u(3, 4), u(4)]),
        "sub": (lambda a, b: T.sum_(T.sub(a, b) * w), [u(3, 4), u(3, 1)]),
        "mul": (lambda a, b: T.sum_(T.mul(a, b) * w), [u(3, 4), u(3, 4)]),
        "div": (lambda a, b: T.sum_(T.div(a, b) * w), [u(3, 4), away_from_zero(3, 4)]),
        "neg": (lambda a: T.sum_(T.neg(a) * w), [u(3, 4)]),
        "power": (lambda a: T.sum_(T.power(a, 3.0) * w), [u(3, 4)]),
        "exp": (lambda a: T.sum_(T.exp(a) * w), [u(3, 4)]),
        "log": (lambda a: T.sum_(T.log(a) * w), [u(3, 4, lo=0.5)]),
        "sqrt": (lambda a: T.sum_(T.sqrt(a) * w), [u(3, 4, lo=0.5)]),
        "abs": (lambda a: T.sum_(T.abs_(a) * w), [away_from_zero(3, 4)]),
        "tanh": (lambda a: T.sum_(T.tanh(a) * w), [u(3, 4)]),
        "sigmoid": (lambda a: T.sum_(T.sigmoid(a) * w), [u(3, 4)]),
        "silu": (lambda a: T.sum_(T.silu(a) * w), [u(3, 4)]),
        "softplus": (lambda a: T.sum_(T.softplus(a) * w), [u(3, 4)]),
        "maximum": (lambda a, b: T.sum_(T.maximum(a, b) * w),
                    [u(3, 4), u(3, 4)]),
        "matmul": (lambda a, b: T.sum_(T.matmul(a, b)), [u(3, 5), u(5, 4)]),
        "matmul_batched": (lambda a, b: T.sum_(T.matmul(a, b) * w), [u(2, 3, 5), u(5, 4)]),
        "linear": (lambda x, wt, b: T.sum_(T.linear(x, wt, b) * w), [u(3, 5), u(5, 4), u(4)]),
        "sum_axis": (lambda a: T.sum_(T.sum_(a, axis=1) * w[:, 0]), [u(3, 4)]),
        "mean_axis": (lambda a: T.sum_(T.mean(a, axis=0) * w[0]), [u(3, 4)]),
        "reshape": (lambda a: T.sum_(T.reshape(a, (4, 3)) * w.T), [u(3, 4)]),
        "getitem_basic": (lambda a: T.sum_(a[1:, ::2] * w[:2, :2]), [u(3, 4)]),
        "getitem_fancy": (lambda a: T.sum_(T.getitem(a, (np.array([0, 2, 0]),)) * w), [u(3, 4)]),
        "concat": (lambda a, b: T.sum_(T.concat([a, b], -1) * w6), [u(3, 4), u(3, 2)]),
        "stack": (lambda a, b: T.sum_(T.stack([a, b], 0) * w234), [u(3, 4), u(3, 4)]),
        "where": (lambda a, b: T.sum_(T.where(w > 0, a, b) * w), [u(3, 4), u(3, 4)]),
        "softmax": (lambda a: T.sum_(T.softmax(a) * w), [u(3, 4)]),
        "log_softmax": (lambda a: T.sum_(T.log_softmax(a) * w), [u(3, 4)]),
        "layer_norm": (lambda x, g, b: T.sum_(T.layer_norm(x, g, b) * w), [u(3, 4), gain, bias]),
        "layer_norm_silu": (lambda x, g, b: T.sum_(T.layer_norm_silu(x, g, b) * w),
                            [u(3, 4), gain, bias]),
        "l2_normalize": (lambda a: T.sum_(T.l2_normalize(a) * w), [u(3, 4)]),
        "mixed_probs": (lambda a: T.sum_(T.mixed_probs(a, 0.01) * w), [u(3, 4)]),
        "categorical_kl": (lambda a, b: T.sum_(categorical_kl(a, b, 0.01)),
                           [u(2, 3, 4), u(2, 3, 4)]),
        "twohot_nll": (lambda a: T.sum_(TwoHot(41).nll(a, np.array([0.3, -2.0])) * w5[:, 0]),
                       [u(2, 41)]),
        "cosine_distance": (lambda a, b: T.sum_(1.0 - T.sum_(T.l2_normalize(a) * T.l2_normalize(b),
                                                                axis=-1)), [u(3, 4), u(3, 4)]),
    }
    return cases


def check_ops(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    with T.precision(64):
        for name, (f, inputs) in op_cases(rng).items():
            err = _check_inputs(f, inputs)
            out.append(CheckResult(f"op:{name}", err, err <= TOL))
        out.extend(_module_checks(rng))
        out.append(_straight_through_check(rng))
    return out


def _param_check(name: str, params: list[Parameter], loss_fn, rng, coords: int = 8,
                 expect_zero: tuple = (), step: float = OP_STEP) -> CheckResult:
    """Compare tape and FD gradients on ``coords`` random entries per parameter."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst, zero_violations = 0.0, []
    tape_all, fd_all = [], []
    for p in params:
        tape = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat_idx = rng.choice(p.data.size, size=min(coords, p.data.size), replace=False)
        idxs = [np.unravel_index(i, p.data.shape) for i in flat_idx]
        orig = p.data

        def scalar(v):
            p.data = v
            with T.no_grad():
                return float(loss_fn().data)

        fd = T.finite_difference_gradient(scalar, orig, step=step, coords=idxs)
        p.data = orig
        sel = tuple(np.array(ix) for ix in zip(*idxs))
        tape_all.append(tape[sel])
        fd_all.append(fd[sel])
        if p in expect_zero and p.grad is not None and np.any(p.grad != 0):
            zero_violations.append(p.name)
    for p in params:
        p.grad = None
    worst = T.relative_error(np.concatenate(tape_all), np.concatenate(fd_all))
    note = f"unexpected gradient on {zero_violations}" if zero_violations else ""
    return CheckResult(name, worst, worst <= TOL and not zero_violations, note)


def _module_checks(rng) -> list[CheckResult]:
    mlp = MLP(rng, 5, 6, 3, layers=2)
    x = rng.uniform(-2, 2, (4, 5))
    wout = rng.uniform(-2, 2, (4, 3))
    gru = GRUCell(rng, 3, 4)
    h0 = rng.uniform(-1, 1, (2, 4))
    xin = rng.uniform(-2, 2, (2, 3))
    wg = rng.uniform(-2, 2, (2, 4))
    return [
        _param_check("module:mlp", mlp.parameters(), lambda: T.sum_(mlp(x) * wout), rng),
        _param_check("module:gru", gru.parameters(), lambda: T.sum_(gru(h0, xin) * wg), rng),
    ]


def _straight_through_check(rng) -> CheckResult:
    """The sampler's backward must equal the backward of the mixed probabilities."""
    logits = rng.uniform(-2, 2, (3, 2, 4))
    w = rng.uniform(-2, 2, (3, 2, 4))
    a = Tensor(logits.copy(), requires_grad=True)
    T.sum_(T.categorical_straight_through(a, np.random.default_rng(0)) * w).backward()
    b = Tensor(logits.copy(), requires_grad=True)
    T.sum_(T.mixed_probs(b, 0.01) * w).backward()
    err = T.relative_error(a.grad, b.grad)
    return CheckResult("op:straight_through", err, err <= 1e-12, "backward == mixed-probs backward")


# ---- world model end to end -------------------------------------------------
def small_model_config(**kw) -> ModelConfig:
    cfg = ModelConfig(deter=6, groups=2, classes=3, embed=8, hidden=8, proj=5,
                      latent_mode="probs", free_nats=0.0, sim_gamma=0.9)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def synthetic_batch(rng: np.random.Generator, B: int = 3, Tn: int = 4, image: int = 4,
                    act_dim: int = 5) -> dict:
    obs = rng.uniform(0, 1, (B, Tn, image, image, 1))
    action = np.eye(act_dim)[rng.integers(act_dim, size=(B, Tn))]
    is_first = np.zeros((B, Tn), bool)
    is_first[:, 0] = True
    is_first[0, 2] = True
    action[is_first] = 0.0
    reward = rng.uniform(-1, 1, (B, Tn))
    cont = (rng.random((B, Tn)) > 0.2).astype(float)
    return {"obs": obs, "action": action, "reward": reward, "cont": cont, "is_first": is_first}


def build_small(seed: int = 0, **cfg_kw):
    """Tiny world model, a synthetic batch, a masked copy and fixed noise."""
    rng = np.random.default_rng(seed)
    cfg = small_model_config(**cfg_kw)
    batch = synthetic_batch(rng)
    wm = WorldModel(cfg, batch["obs"].shape[2:], batch["action"].shape[-1], seed=seed)
    # perturb the EMA twin so the two branches differ
    for _, em in wm.ema_pairs():
        em.data = em.data + rng.normal(0, 0.1, em.data.shape)
    masked, _ = mask_batch(batch["obs"], CuboidSpec(2, 2, 2), 0.5, rng)
    noise = wm.noise(rng, *batch["obs"].shape[:2])
    return wm, batch, masked, noise


def check_losses(seed: int = 0, coords: int = 8) -> list[CheckResult]:
    out = []
    with T.precision(64):
        for variant in ("cross", "mask"):
            wm, batch, masked, noise = build_small(seed, sim_loss_variant=variant)
            rng = np.random.default_rng(seed + 1)
            params = wm.online_parameters()
            names = ("dyn", "rec", "sim", "pred", "total") if variant == "cross" else ("sim",)
            _, info, _ = wm.loss_terms(batch, masked, None, noise)
            frozen = info["detached"]
            for term in names:
                def loss_fn(term=term):
                    terms, _, _ = wm.loss_terms(batch, masked, None, noise, frozen)
                    if term == "total":
                        return terms["dyn"] + terms["rec"] + terms["sim"] + terms["pred"]
                    return terms[term]
                label = f"loss:{term}" + (f"[{variant}]" if variant != "cross" else "")
                out.append(_param_check(label, params, loss_fn, rng, coords, step=LOSS_STEP))
        out.extend(check_firewalls(seed))
    return out


def check_firewalls(seed: int = 0) -> list[CheckResult]:
    """Zero-gradient contracts: EMA twin, reconstruction target, similarity target."""
    out = []
    with T.precision(64):
        wm, batch, masked, noise = build_small(seed)
        terms, _, ro = wm.loss_terms(batch, masked, None, noise)
        total = terms["dyn"] + terms["rec"] + terms["sim"] + terms["pred"]
        for p in wm.parameters():
            p.grad = None
        total.backward()
        ema_grads = [n for n, p in wm.ema.named_parameters() if p.grad is not None]
        online_missing = [n for n, p in wm.named_parameters()
                          if not n.startswith("ema.") and p.grad is None]
        out.append(CheckResult("firewall:ema_params", float(len(ema_grads)), not ema_grads,
                               f"EMA params with gradient: {ema_grads}" if ema_grads else
                               "no EMA parameter received a gradient"))
        out.append(CheckResult("firewall:online_params_populated", float(len(online_missing)),
                               not online_missing,
                               f"online params without gradient: {online_missing}"
                               if online_missing else "every online parameter has a gradient"))
        for p in wm.parameters():
            p.grad = None

        # the prior network reaches L_sim only through its next-state target
        terms, _, _ = wm.loss_terms(batch, masked, None, noise)
        terms["sim"].backward()
        prior_grad = max(float(np.abs(p.grad).max()) if p.grad is not None else 0.0
                         for p in wm.mask.prior.parameters())
        for p in wm.parameters():
            p.grad = None
        out.append(CheckResult("firewall:sim_target", prior_grad, prior_grad == 0.0,
                               "similarity target is gradient-dead"))

        rng = np.random.default_rng(seed)
        proj = wm.projection
        raw = Tensor(rng.normal(size=(4, wm.feat_dim)), requires_grad=True)
        msk = Tensor(rng.normal(size=(4, wm.feat_dim)), requires_grad=True)
        latent_rec_loss(raw, msk, proj).backward()
        g = 0.0 if raw.grad is None else float(np.abs(raw.grad).max())
        out.append(CheckResult("firewall:rec_target", g, g == 0.0 and msk.grad is not None,
                               "reconstruction target is gradient-dead"))
        proj.zero_grad()

        na = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        nb = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        ca = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        cb = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        sim_loss(ca, cb, np.zeros(4), np.ones(4), na, nb, 0.9).backward()
        dead = na.grad is None and nb.grad is None and ca.grad is not None
        out.append(CheckResult("firewall:sim_next_inputs", 0.0 if dead else 1.0, dead,
                               "next-state inputs receive no gradient"))

        post = Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)
        prior = Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)
        loss, _ = dyn_loss(post, prior, 0.01, 0.0, 0.5, 0.0)
        loss.backward()
        g = 0.0 if post.grad is None else float(np.abs(post.grad).max())
        out.append(CheckResult("firewall:dyn_sg_posterior", g, g == 0.0,
                               "sg(q)||p term sends nothing to the posterior"))
    return out


def run_all(seed: int = 0) -> list[CheckResult]:
    return check_ops(seed) + check_losses(seed)
