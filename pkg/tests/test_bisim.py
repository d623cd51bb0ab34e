import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from hrssm.bisim import (batch_bisim, behavioral_target, cosine, diameter_bound_check,
                         random_bisim_instance, reproduce_counterexample,
                         tabular_bisim_fixed_point, wasserstein1)
from hrssm.envs import plain_mdp, random_plain_mdp


def test_cosine_reference_values():
    assert cosine((1, 2, 3, 1, 1), (2, 1, 1, 1, 1), "similarity") == pytest.approx(0.7955, abs=5e-5)
    assert cosine((1, 2, 3), (2, 1, 1), "similarity") == pytest.approx(0.7638, abs=5e-5)
    x = np.array([0.3, -1.0, 2.0])
    assert cosine(x, x, "distance") == pytest.approx(0.0, abs=1e-15)
    assert cosine(x, x, "similarity") == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(1e-3, 1e3))
def test_cosine_ranges(a, b, c):
    a, b = np.array(a), np.array(b)
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    assert -1e-12 <= cosine(a, b) <= 2 + 1e-12
    assert -1 - 1e-12 <= cosine(a, b, "similarity") <= 1 + 1e-12
    assert cosine(a, c * a) == pytest.approx(0.0, abs=1e-12)


def test_behavioral_target_values():
    sim_next = cosine((2, 2, 1, 1, 1), (1, 1, 2, 1, 1), "similarity")
    assert sim_next == pytest.approx(0.8528, abs=5e-5)
    assert behavioral_target(0.03, 0.02, sim_next, 0.92) == pytest.approx(0.7946, abs=5e-5)
    assert behavioral_target(0.5, 0.5, 0.0, 0.9) == 0.0
    endo_next = cosine((2, 2, 1), (1, 1, 2), "similarity")
    assert behavioral_target(0.03, 0.02, endo_next, 0.92) == pytest.approx(0.7612, abs=5e-5)


def test_counterexample_report():
    rep = reproduce_counterexample()
    assert rep.ok
    assert abs(rep.full_sim - 0.7955) <= 5e-4 and abs(rep.full_target - 0.7945) <= 5e-4
    assert abs(rep.endo_sim - 0.7638) <= 5e-4 and abs(rep.endo_target - 0.7612) <= 5e-4
    assert rep.full_delta < 0.01 and rep.endo_delta < 0.01
    assert rep.lines()[-1].startswith("PASS")


# ---- Wasserstein-1 ---------------------------------------------------------
def _lp_w1(cost, p, q):
    """Independent oracle: transportation LP via scipy."""
    n, m = cost.shape
    A = []
    for i in range(n):
        row = np.zeros((n, m))
        row[i] = 1
        A.append(row.ravel())
    for j in range(m):
        col = np.zeros((n, m))
        col[:, j] = 1
        A.append(col.ravel())
    res = linprog(cost.ravel(), A_eq=np.array(A), b_eq=np.concatenate([p, q]), bounds=(0, None),
                  method="highs")
    return res.fun


def test_w1_two_by_two_example():
    cost = np.array([[0.0, 2.0], [2.0, 0.0]])
    assert wasserstein1(cost, [0.5, 0.5], [1.0, 0.0]) == pytest.approx(1.0, abs=1e-12)


def test_w1_point_masses_and_identity(rng):
    d = rng.random((4, 4))
    d = d + d.T
    np.fill_diagonal(d, 0)
    p = np.eye(4)[1]
    q = np.eye(4)[3]
    assert wasserstein1(d, p, q) == pytest.approx(d[1, 3])
    r = rng.dirichlet(np.ones(4))
    assert wasserstein1(d, r, r) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2 ** 31))
def test_w1_against_lp_and_properties(n, seed):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(n, 2))
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    p, q = r.dirichlet(np.ones(n)), r.dirichlet(np.ones(n))
    w = wasserstein1(d, p, q)
    assert w == pytest.approx(_lp_w1(d, p, q), abs=1e-8)
    assert w == pytest.approx(wasserstein1(d, q, p), abs=1e-10)
    assert -1e-12 <= w <= d.max() + 1e-12


def test_w1_rejects_unnormalised():
    with pytest.raises(ValueError):
        wasserstein1(np.zeros((2, 2)), [0.5, 0.6], [1.0, 0.0])


# ---- tabular fixed point -----------------------------------------------------
def _two_state_self_loops(gamma):
    P = np.zeros((2, 1, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1.0
    return plain_mdp(P, np.array([[0.0], [1.0]]), gamma, 0.0, 1.0)


def test_two_state_closed_form():
    gamma = 0.9
    mdp = _two_state_self_loops(gamma)
    mt = tabular_bisim_fixed_point(mdp, np.zeros(2, int), tol=1e-12, max_iters=5000)
    assert mt.converged
    assert mt.d[0, 1] == pytest.approx(1.0 / (1.0 - gamma), abs=1e-9)
    rep = diameter_bound_check(mt, 0.0, 1.0, gamma)
    assert rep.ok and rep.diameter == pytest.approx(rep.bound, abs=1e-9)


def test_identical_states_distance_zero():
    P = np.full((3, 2, 3), 1 / 3)
    R = np.full((3, 2), 0.4)
    mt = tabular_bisim_fixed_point(plain_mdp(P, R, 0.9, 0, 1), np.zeros(3, int))
    assert np.all(mt.d == 0.0)


def test_zero_reward_diameter_zero(rng):
    mdp = random_plain_mdp(rng, 5, 2, 0.9)
    mdp.reward = np.zeros_like(mdp.reward)
    mt = tabular_bisim_fixed_point(mdp, rng.integers(0, 2, 5))
    assert mt.diameter() == 0.0 and diameter_bound_check(mt, 0, 1, 0.9).ok


def test_metric_properties_and_monotone_residuals(rng):
    for _ in range(10):
        n = int(rng.integers(2, 9))
        mdp = random_plain_mdp(rng, n, 2, 0.9)
        mt = tabular_bisim_fixed_point(mdp, rng.integers(0, 2, n))
        d = mt.d
        assert mt.converged and mt.residual < 1e-9
        assert np.allclose(d, d.T) and np.all(d >= 0) and np.all(np.diag(d) == 0)
        res = np.array(mt.residuals[1:])
        assert np.all(np.diff(res) <= 1e-12)


def test_unique_fixed_point_from_two_starts(rng):
    for _ in range(5):
        n = int(rng.integers(2, 8))
        mdp = random_plain_mdp(rng, n, 2, 0.9)
        pol = rng.integers(0, 2, n)
        tol = 1e-9
        lo = tabular_bisim_fixed_point(mdp, pol, tol=tol)
        bound = (mdp.r_max - mdp.r_min) / (1 - mdp.gamma)
        d0 = np.full((n, n), bound)
        np.fill_diagonal(d0, 0.0)
        hi = tabular_bisim_fixed_point(mdp, pol, tol=tol, d0=d0)
        assert lo.converged and hi.converged
        assert np.abs(lo.d - hi.d).max() <= 10 * tol


def test_independent_coupling_bounds_wasserstein(rng):
    mdp = random_plain_mdp(rng, 5, 2, 0.9)
    pol = rng.integers(0, 2, 5)
    w = tabular_bisim_fixed_point(mdp, pol)
    ind = tabular_bisim_fixed_point(mdp, pol, coupling="independent")
    assert ind.converged
    off = ~np.eye(5, dtype=bool)
    assert np.all(ind.d[off] >= w.d[off] - 1e-9)


def test_non_convergence_flagged(rng):
    mdp = random_plain_mdp(rng, 4, 2, 0.99)
    mt = tabular_bisim_fixed_point(mdp, np.zeros(4, int), max_iters=3)
    assert not mt.converged and mt.iterations == 3


def test_twin_instances_and_batch():
    rng = np.random.default_rng(0)
    mdp, pol, twin = random_bisim_instance(rng, max_states=6)
    reports = batch_bisim(20, seed=3)
    assert all(r.ok for r in reports)
    assert all(r.twin_distance <= 1e-9 for r in reports if r.twin_distance is not None)
