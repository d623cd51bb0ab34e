"""Executable check that masking reward- and dynamics-irrelevant exogenous
dimensions preserves values and optimal policies on finite MDPs.

Terminology: ``masked_dims`` are exogenous dimensions dropped by the mask;
the remaining ``kept`` dimensions, together with the endogenous state, form
the reduced state.  A mask is admissible when

1. the reward never reads a masked dimension,
2. the endogenous transition never reads a masked dimension,
3. the exogenous chain factorises into a kept block and a masked block.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .envs import TabularMDP, make_factored_mdp

log = logging.getLogger(__name__)


class ConditionViolation(ValueError):
    def __init__(self, condition: int, detail: str):
        super().__init__(f"condition ({condition}) violated: {detail}")
        self.condition = condition


@dataclass
class MaskReduction:
    source: TabularMDP
    masked_dims: tuple[int, ...]
    kept_dims: tuple[int, ...]
    reduced: TabularMDP
    state_map: np.ndarray   # full flat index -> reduced flat index


def _constant_along(arr: np.ndarray, axes, tol: float = 1e-12) -> bool:
    if not axes:
        return True
    ref = arr
    for ax in axes:
        ref = np.take(ref, [0], axis=ax)
    return bool(np.all(np.abs(arr - ref) <= tol))


def _joint_factorises(joint: np.ndarray, dims: tuple, kept: tuple, masked: tuple,
                      tol: float = 1e-12) -> tuple[bool, np.ndarray | None, np.ndarray | None]:
    n = len(dims)
    J = joint.reshape(dims + dims)
    order = list(kept) + list(masked)
    J = J.transpose(order + [n + i for i in order])
    nk = int(np.prod([dims[i] for i in kept], dtype=int))
    nm = int(np.prod([dims[i] for i in masked], dtype=int))
    J = J.reshape(nk, nm, nk, nm)
    kept_block = J.sum(3)                 # P(kept' | kept, masked)
    masked_block = J.sum(2)               # P(masked' | kept, masked)
    if not _constant_along(kept_block, [1], tol) or not _constant_along(masked_block, [0], tol):
        return False, None, None
    Pk, Pm = kept_block[:, 0, :], masked_block[0]
    ok = np.allclose(J, np.einsum("ac,bd->abcd", Pk, Pm), atol=tol, rtol=0)
    return ok, Pk, Pm


def reduce_mdp(mdp: TabularMDP, masked_dims, audit: bool = True) -> MaskReduction:
    """Marginalise ``masked_dims`` out of ``mdp``.

    With ``audit=False`` the three conditions are not enforced and the
    reduction simply reads the masked dimensions at value 0; this exists so
    tests can show that a violating MDP produces a value gap.
    """
    masked = tuple(sorted(set(int(d) for d in masked_dims)))
    n = len(mdp.exo_dims)
    if any(d < 0 or d >= n for d in masked):
        raise ValueError(f"masked dims {masked} out of range for {n} exogenous dims")
    kept = tuple(d for d in range(n) if d not in masked)
    r_axes = [1 + d for d in masked]
    Pk = None
    if mdp.exo_joint is not None:
        ok, Pk, _ = _joint_factorises(mdp.exo_joint, mdp.exo_dims, kept, masked)
        if audit and not ok:
            raise ConditionViolation(3, f"exogenous chain does not factorise over masked dims {masked}")
    if audit:
        if not _constant_along(mdp.reward, r_axes):
            raise ConditionViolation(1, f"reward reads masked dims {masked}")
        if not _constant_along(mdp.p_endo, r_axes):
            raise ConditionViolation(2, f"endogenous transition reads masked dims {masked}")
    reward, p_endo = mdp.reward, mdp.p_endo
    for ax in sorted(r_axes, reverse=True):
        reward = np.take(reward, 0, axis=ax)
        p_endo = np.take(p_endo, 0, axis=ax)
    kept_dims = tuple(mdp.exo_dims[d] for d in kept)
    if mdp.exo_joint is None:
        chains = [mdp.exo_chains[d] for d in kept]
        joint = None
    else:
        if Pk is None:   # unaudited, non-factorising: condition on masked value 0
            _, Pk, _ = _joint_factorises(mdp.exo_joint, mdp.exo_dims, kept, masked, tol=np.inf)
        chains, joint = [], Pk
    reduced = TabularMDP(mdp.n_endo, kept_dims, mdp.n_actions, np.ascontiguousarray(p_endo),
                         chains, np.ascontiguousarray(reward), mdp.gamma,
                         tuple(kept.index(d) for d in mdp.relevant_dims if d in kept),
                         mdp.r_min, mdp.r_max, joint)
    smap = np.empty(mdp.n_states, dtype=int)
    for idx in range(mdp.n_states):
        s, exo = mdp.unravel(idx)
        smap[idx] = reduced.state_index(s, tuple(exo[d] for d in kept))
    return MaskReduction(mdp, masked, kept, reduced, smap)


def policy_matrix(policy, n_states: int, n_actions: int) -> np.ndarray:
    pol = np.asarray(policy)
    if pol.ndim == 1:
        pi = np.zeros((n_states, n_actions))
        pi[np.arange(n_states), pol.astype(int)] = 1.0
        return pi
    return pol.astype(np.float64)


def policy_model(mdp: TabularMDP, policy) -> tuple[np.ndarray, np.ndarray]:
    P, R = mdp.flat()
    pi = policy_matrix(policy, mdp.n_states, mdp.n_actions)
    return (pi * R).sum(1), np.einsum("sa,sat->st", pi, P)


def value_iteration(mdp: TabularMDP, policy, tol: float = 1e-10,
                    max_iters: int = 1_000_000) -> np.ndarray:
    """Iterate the Bellman expectation operator until the sup-norm change is
    below ``tol * (1 - gamma) / gamma``, so the returned V is within ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    r, P = policy_model(mdp, policy)
    g = mdp.gamma
    V = np.zeros(len(r))
    stop = tol * (1 - g) / g if g > 0 else np.inf
    for _ in range(max_iters):
        new = r + g * (P @ V)
        delta = np.abs(new - V).max(initial=0.0)
        V = new
        if delta < stop:
            break
    return V


def evaluate_exact(mdp: TabularMDP, policy) -> np.ndarray:
    r, P = policy_model(mdp, policy)
    return np.linalg.solve(np.eye(len(r)) - mdp.gamma * P, r)


def policy_iteration(mdp: TabularMDP, max_iters: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Exact optimal deterministic policy and its value (ties keep the old action)."""
    P, R = mdp.flat()
    pol = np.zeros(mdp.n_states, dtype=int)
    for _ in range(max_iters):
        V = evaluate_exact(mdp, pol)
        Q = R + mdp.gamma * np.einsum("sat,t->sa", P, V)
        best = Q.max(1)
        improve = Q[np.arange(len(pol)), pol] < best - 1e-12
        if not improve.any():
            return pol, V
        pol = np.where(improve, Q.argmax(1), pol)
    raise RuntimeError("policy iteration did not terminate")


@dataclass
class ReductionReport:
    value_gap: float
    value_gap_state: int
    optimality_gap: float | None
    optimality_gap_state: int | None
    tol: float
    n_full: int
    n_reduced: int
    extras: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        if self.value_gap > self.tol:
            return False
        return self.optimality_gap is None or self.optimality_gap <= self.tol


def verify_theorem1(mdp: TabularMDP, masked_dims, policy_on_reduced=None, tol: float = 1e-8,
                    vi_tol: float | None = None, audit: bool = True) -> ReductionReport:
    """Compare values of a reduced-state policy on the reduced and the full MDP.

    Without an explicit policy the optimal reduced policy is used (policy
    iteration), and its lifted value is also compared to the full MDP's V*.
    """
    vi_tol = tol / 100 if vi_tol is None else vi_tol
    red = reduce_mdp(mdp, masked_dims, audit=audit)
    optimal = policy_on_reduced is None
    if optimal:
        policy_on_reduced, _ = policy_iteration(red.reduced)
    pol_red = np.asarray(policy_on_reduced)
    lifted = pol_red[red.state_map]
    V_red = value_iteration(red.reduced, pol_red, vi_tol)
    V_full = value_iteration(mdp, lifted, vi_tol)
    gap = np.abs(V_red[red.state_map] - V_full)
    worst = int(np.argmax(gap))
    opt_gap = opt_state = None
    if optimal:
        _, V_star = policy_iteration(mdp)
        og = np.abs(V_red[red.state_map] - V_star)
        opt_state = int(np.argmax(og))
        opt_gap = float(og[opt_state])
    return ReductionReport(float(gap[worst]), worst, opt_gap, opt_state, tol, mdp.n_states,
                          red.reduced.n_states)


def make_violator(rng: np.random.Generator, n_endo: int = 3, exo_dims=(2, 2, 2, 2),
                  n_actions: int = 2, masked_dims=(0, 1), contrast: float = 1.0,
                  gamma: float = 0.9) -> TabularMDP:
    """Conforming MDP whose reward then gets a ``contrast`` bonus whenever the
    first masked dimension equals 1, breaking condition (1)."""
    kept = tuple(d for d in range(len(exo_dims)) if d not in masked_dims)
    mdp = make_factored_mdp(rng, n_endo, exo_dims, n_actions, kept, gamma,
                            r_min=0.0, r_max=1.0)
    reward = mdp.reward.copy()
    idx = [slice(None)] * reward.ndim
    idx[1 + masked_dims[0]] = 1
    reward[tuple(idx)] += contrast
    mdp.reward = reward
    mdp.r_max = 1.0 + contrast
    mdp.relevant_dims = tuple(sorted(kept + (masked_dims[0],)))
    return mdp


def random_conforming_instance(rng: np.random.Generator, gamma: float = 0.9):
    """Instance used by the batch check: <=5 endogenous states, <=3 actions,
    four binary exogenous dims of which two (chosen at random) are masked."""
    n_endo = int(rng.integers(1, 6))
    n_actions = int(rng.integers(1, 4))
    perm = rng.permutation(4)
    masked, kept = tuple(sorted(perm[:2].tolist())), tuple(sorted(perm[2:].tolist()))
    mdp = make_factored_mdp(rng, n_endo, (2, 2, 2, 2), n_actions, kept, gamma)
    return mdp, masked


def batch_verify(n_instances: int = 100, seed: int = 0, tol: float = 1e-8,
                 gamma: float = 0.9) -> list[ReductionReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(n_instances):
        mdp, masked = random_conforming_instance(rng, gamma)
        reports.append(verify_theorem1(mdp, masked, tol=tol))
    return reports
