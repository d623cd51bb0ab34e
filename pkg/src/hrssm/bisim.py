"""Bisimulation distances on finite MDPs and on latent vectors.

Exact Wasserstein-1 uses POT's network-simplex solver (``ot.emd2``).  The
fixed-point iteration applies the pi-bisimulation operator
``F(d)(u, v) = |R(u) - R(v)| + gamma * W1(d)(P_u, P_v)`` until the sup-norm
change drops below ``tol``.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

# keep POT from importing every deep-learning backend it can find
for _backend in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")
import ot  # noqa: E402

from .envs import TabularMDP  # noqa: E402

log = logging.getLogger(__name__)

MAX_OT_SUPPORT = 64
COSINE_EPS = 1e-8

zero_vector_warnings = 0


def cosine(a, b, mode: str = "distance") -> float:
    """Cosine similarity ``a.b / (|a||b|)`` or distance ``1 - similarity``."""
    global zero_vector_warnings
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < COSINE_EPS or nb < COSINE_EPS:
        zero_vector_warnings += 1
        log.warning("cosine of a (near) zero vector; norms guarded by %g", COSINE_EPS)
    sim = float(a @ b / (max(na, COSINE_EPS) * max(nb, COSINE_EPS)))
    if mode == "similarity":
        return sim
    if mode == "distance":
        return 1.0 - sim
    raise ValueError(f"mode must be 'distance' or 'similarity', got {mode!r}")


def behavioral_target(r_i: float, r_j: float, next_dist: float, gamma: float) -> float:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    return abs(r_i - r_j) + gamma * next_dist


def wasserstein1(cost: np.ndarray, p, q, tol: float = 1e-9) -> float:
    """Exact optimal-transport cost between ``p`` and ``q`` under ``cost``."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    for name, dist in (("p", p), ("q", q)):
        if abs(dist.sum() - 1.0) > tol or np.any(dist < -tol):
            raise ValueError(f"{name} is not a probability vector (sum {dist.sum():.12g})")
    if cost.shape != (len(p), len(q)):
        raise ValueError(f"cost shape {cost.shape} does not match supports {len(p)}x{len(q)}")
    if len(p) > MAX_OT_SUPPORT or len(q) > MAX_OT_SUPPORT:
        raise ValueError(f"exact transport limited to {MAX_OT_SUPPORT} states; "
                         "use the independent coupling")
    if np.array_equal(p, q) and np.allclose(np.diag(cost), 0.0):
        return 0.0
    # drop empty support points: smaller problems and no degenerate pivots
    ip, iq = p > 0, q > 0
    pp, qq = p[ip], q[iq]
    pp, qq = pp / pp.sum(), qq / qq.sum()
    return float(ot.emd2(pp, qq, np.ascontiguousarray(cost[np.ix_(ip, iq)])))


@dataclass
class MetricTable:
    d: np.ndarray
    iterations: int
    residual: float
    converged: bool
    residuals: list

    def diameter(self) -> float:
        return float(self.d.max()) if self.d.size else 0.0


def policy_average(mdp: TabularMDP, policy) -> tuple[np.ndarray, np.ndarray]:
    """Reward vector and transition matrix under ``policy``.

    ``policy`` is either an integer action per state or a ``[S, A]`` table
    of action probabilities.
    """
    P, R = mdp.flat()
    pol = np.asarray(policy)
    S = P.shape[0]
    if pol.ndim == 1:
        pi = np.zeros((S, mdp.n_actions))
        pi[np.arange(S), pol.astype(int)] = 1.0
    else:
        pi = pol.astype(np.float64)
    r_pi = (pi * R).sum(1)
    P_pi = np.einsum("sa,sat->st", pi, P)
    return r_pi, P_pi


def bisim_operator(d: np.ndarray, r_pi: np.ndarray, P_pi: np.ndarray, gamma: float,
                   coupling: str = "wasserstein") -> np.ndarray:
    S = len(r_pi)
    if coupling == "independent":
        # E_{u'~P_u, v'~P_v} d(u', v')
        nxt = P_pi @ d @ P_pi.T
        out = np.abs(r_pi[:, None] - r_pi[None, :]) + gamma * nxt
        return out
    out = np.zeros_like(d)
    if coupling != "wasserstein":
        raise ValueError(f"coupling must be 'wasserstein' or 'independent', got {coupling!r}")
    for u in range(S):
        for v in range(u + 1, S):
            if r_pi[u] == r_pi[v] and np.array_equal(P_pi[u], P_pi[v]):
                val = 0.0
            else:
                val = abs(r_pi[u] - r_pi[v]) + gamma * wasserstein1(d, P_pi[u], P_pi[v])
            out[u, v] = out[v, u] = val
    return out


def tabular_bisim_fixed_point(mdp: TabularMDP, policy, gamma: float | None = None,
                              tol: float = 1e-9, max_iters: int = 2000,
                              coupling: str = "wasserstein",
                              d0: np.ndarray | None = None) -> MetricTable:
    """Iterate the bisimulation operator from ``d0`` (zeros by default)."""
    gamma = mdp.gamma if gamma is None else gamma
    if tol <= 0:
        raise ValueError("tol must be positive")
    r_pi, P_pi = policy_average(mdp, policy)
    S = len(r_pi)
    d = np.zeros((S, S)) if d0 is None else np.array(d0, dtype=np.float64)
    residuals = []
    residual = np.inf
    for it in range(1, max_iters + 1):
        new = bisim_operator(d, r_pi, P_pi, gamma, coupling)
        residual = float(np.abs(new - d).max()) if S else 0.0
        residuals.append(residual)
        d = new
        if residual < tol:
            return MetricTable(d, it, residual, True, residuals)
    log.warning("bisimulation iteration did not converge: residual %.3g after %d sweeps",
                residual, max_iters)
    return MetricTable(d, max_iters, residual, False, residuals)


@dataclass
class DiameterReport:
    ok: bool
    diameter: float
    bound: float
    worst_pair: tuple

    def __str__(self) -> str:
        verdict = "PASS" if self.ok else "FAIL"
        return (f"{verdict} diameter={self.diameter:.12g} bound={self.bound:.12g} "
                f"worst pair={self.worst_pair}")


def diameter_bound_check(metric: MetricTable, r_min: float, r_max: float, gamma: float,
                         tol: float = 1e-9) -> DiameterReport:
    bound = (r_max - r_min) / (1.0 - gamma)
    if metric.d.size == 0:
        return DiameterReport(True, 0.0, bound, ())
    u, v = np.unravel_index(int(np.argmax(metric.d)), metric.d.shape)
    diam = float(metric.d[u, v])
    return DiameterReport(diam <= bound + tol, diam, bound, (int(u), int(v)))


# ---- the hand-built counterexample ------------------------------------------
COUNTEREXAMPLE = {
    "u": (1, 2, 3, 1, 1), "v": (2, 1, 1, 1, 1),
    "u_next": (2, 2, 1, 1, 1), "v_next": (1, 1, 2, 1, 1),
    "endo_dims": 3, "gamma": 0.92, "r_u": 0.03, "r_v": 0.02, "eps": 0.01,
}
# reference digits for the construction, four decimals
REFERENCE = {"full_sim": 0.7955, "full_target": 0.7945, "endo_sim": 0.7638, "endo_target": 0.7612}


@dataclass
class CounterexampleReport:
    full_sim: float
    full_next_sim: float
    full_target: float
    full_delta: float
    endo_sim: float
    endo_next_sim: float
    endo_target: float
    endo_delta: float
    eps: float
    failures: list

    @property
    def ok(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        return [
            f"full states    similarity d(u,v)     = {self.full_sim:.4f}",
            f"full states    next similarity       = {self.full_next_sim:.4f}",
            f"full states    behavioral target     = {self.full_target:.4f}",
            f"full states    delta                 = {self.full_delta:.4f} (< eps={self.eps})",
            f"endogenous     similarity d(u,v)     = {self.endo_sim:.4f}",
            f"endogenous     next similarity       = {self.endo_next_sim:.4f}",
            f"endogenous     behavioral target     = {self.endo_target:.4f}",
            f"endogenous     delta                 = {self.endo_delta:.4f} (< eps={self.eps})",
            "PASS: both pairs sit within eps of their behavioral targets while the full "
            "states still carry exogenous dimensions" if self.ok
            else "FAIL: " + "; ".join(self.failures),
        ]


def reproduce_counterexample(value_tol: float = 5e-4) -> CounterexampleReport:
    """Similarity-mode arithmetic showing that closeness to the bisimulation
    fixed point does not imply that exogenous dimensions were removed."""
    c = COUNTEREXAMPLE
    k = c["endo_dims"]
    u, v, un, vn = (np.array(c[key], dtype=float) for key in ("u", "v", "u_next", "v_next"))
    full_sim = cosine(u, v, "similarity")
    full_next = cosine(un, vn, "similarity")
    full_target = behavioral_target(c["r_u"], c["r_v"], full_next, c["gamma"])
    endo_sim = cosine(u[:k], v[:k], "similarity")
    endo_next = cosine(un[:k], vn[:k], "similarity")
    endo_target = behavioral_target(c["r_u"], c["r_v"], endo_next, c["gamma"])
    full_delta = abs(full_sim - full_target)
    endo_delta = abs(endo_sim - endo_target)
    failures = []
    for name, got in (("full_sim", full_sim), ("full_target", full_target),
                      ("endo_sim", endo_sim), ("endo_target", endo_target)):
        if abs(got - REFERENCE[name]) > value_tol:
            failures.append(f"{name}={got:.6f} differs from {REFERENCE[name]} by more than {value_tol}")
    for name, delta in (("full", full_delta), ("endogenous", endo_delta)):
        if not delta < c["eps"]:
            failures.append(f"{name} delta {delta:.6f} is not below eps={c['eps']}")
    if u.size <= k:
        failures.append("full states carry no exogenous dimensions")
    return CounterexampleReport(full_sim, full_next, full_target, full_delta, endo_sim, endo_next,
                                endo_target, endo_delta, c["eps"], failures)


# ---- batch verification -----------------------------------------------------
@dataclass
class BisimInstanceReport:
    n_states: int
    converged: bool
    iterations: int
    residual: float
    diameter: DiameterReport
    twin_pair: tuple | None
    twin_distance: float | None

    @property
    def ok(self) -> bool:
        twin_ok = self.twin_distance is None or self.twin_distance <= 1e-9
        return self.converged and self.diameter.ok and twin_ok


def random_bisim_instance(rng: np.random.Generator, max_states: int = 10, n_actions: int = 2,
                          gamma: float = 0.9):
    """Random MDP with a deterministic random policy.  When there are at
    least three states, one state is made an exact twin of another (same
    rewards, same transition rows, same action)."""
    from .envs import plain_mdp

    n = int(rng.integers(2, max_states + 1))
    P = rng.dirichlet(np.ones(n), size=(n, n_actions))
    R = rng.uniform(0.0, 1.0, size=(n, n_actions))
    policy = rng.integers(0, n_actions, size=n)
    twin = None
    if n >= 3:
        a, b = (int(v) for v in rng.choice(n, size=2, replace=False))
        P[b], R[b], policy[b] = P[a], R[a], policy[a]
        twin = (a, b)
    return plain_mdp(P, R, gamma, 0.0, 1.0), policy, twin


def batch_bisim(n_instances: int = 100, seed: int = 0, gamma: float = 0.9, tol: float = 1e-9,
                max_iters: int = 2000) -> list[BisimInstanceReport]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_instances):
        mdp, policy, twin = random_bisim_instance(rng, gamma=gamma)
        mt = tabular_bisim_fixed_point(mdp, policy, gamma, tol, max_iters)
        diam = diameter_bound_check(mt, mdp.r_min, mdp.r_max, gamma, tol)
        td = float(mt.d[twin]) if twin else None
        out.append(BisimInstanceReport(mdp.n_states, mt.converged, mt.iterations, mt.residual,
                                       diam, twin, td))
    return out
