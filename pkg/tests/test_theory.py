import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrssm.envs import TabularMDP, make_factored_mdp, plain_mdp, random_plain_mdp
from hrssm.theory import (ConditionViolation, batch_verify, evaluate_exact, make_violator,
                          policy_iteration, random_conforming_instance, reduce_mdp,
                          value_iteration, verify_theorem1)


def test_mask_nothing_is_identity(rng):
    mdp = make_factored_mdp(rng)
    red = reduce_mdp(mdp, ())
    P, R = mdp.flat()
    P2, R2 = red.reduced.flat()
    assert np.array_equal(P, P2) and np.array_equal(R, R2)


def test_mask_all_leaves_endogenous(rng):
    mdp = make_factored_mdp(rng, n_endo=4, relevant_dims=())
    red = reduce_mdp(mdp, (0, 1, 2, 3))
    assert red.reduced.n_states == 4


def test_violator_rejected_with_condition_one(rng):
    mdp = make_violator(rng)
    with pytest.raises(ConditionViolation) as exc:
        reduce_mdp(mdp, (0, 1))
    assert exc.value.condition == 1 and "(1)" in str(exc.value)


def test_dynamics_violation_names_condition_two(rng):
    mdp = make_factored_mdp(rng, relevant_dims=(0, 2, 3))
    mdp.reward = np.broadcast_to(mdp.reward[:, :1], mdp.reward.shape).copy()
    with pytest.raises(ConditionViolation) as exc:
        reduce_mdp(mdp, (0, 1))
    assert exc.value.condition == 2


def test_correlated_exogenous_chain_names_condition_three(rng):
    mdp = make_factored_mdp(rng, exo_dims=(2, 2), relevant_dims=(1,))
    joint = rng.dirichlet(np.ones(4), size=4)  # couples both dims
    mdp.exo_joint = joint
    with pytest.raises(ConditionViolation) as exc:
        reduce_mdp(mdp, (0,))
    assert exc.value.condition == 3


def test_violator_shows_value_gap(rng):
    mdp = make_violator(rng, contrast=1.0)
    rep = verify_theorem1(mdp, (0, 1), audit=False)
    assert rep.value_gap > 1e-3 and not rep.ok


def test_value_iteration_simple_cases():
    P = np.ones((1, 1, 1))
    absorbing = plain_mdp(P, np.ones((1, 1)), 0.9)
    assert value_iteration(absorbing, [0], tol=1e-12)[0] == pytest.approx(10.0, abs=1e-12)
    zero = plain_mdp(np.full((3, 2, 3), 1 / 3), np.zeros((3, 2)), 0.9)
    assert np.all(value_iteration(zero, [0, 1, 0]) == 0.0)


def test_value_iteration_matches_linear_solve(rng):
    for _ in range(10):
        mdp = random_plain_mdp(rng, 5, 3, 0.9)
        pol = rng.integers(0, 3, 5)
        v = value_iteration(mdp, pol, tol=1e-11)
        r = mdp.reward[np.arange(5), pol]
        Ppi = mdp.p_endo[np.arange(5), pol]
        oracle = np.linalg.solve(np.eye(5) - 0.9 * Ppi, r)
        assert np.abs(v - oracle).max() <= 1e-9
        assert np.allclose(evaluate_exact(mdp, pol), oracle, atol=1e-12)


def test_policy_iteration_is_optimal(rng):
    mdp = random_plain_mdp(rng, 4, 2, 0.8)
    pol, V = policy_iteration(mdp)
    # brute force over all 16 deterministic policies
    best = max((evaluate_exact(mdp, np.array(p)) for p in np.ndindex(*(2,) * 4)),
               key=lambda v: v.sum())
    assert np.allclose(V, best, atol=1e-10)


def test_zero_exo_dims_trivial(rng):
    mdp = make_factored_mdp(rng, n_endo=3, exo_dims=(), relevant_dims=())
    rep = verify_theorem1(mdp, ())
    assert rep.ok and rep.value_gap <= 1e-12


def test_conforming_example_gap(rng):
    mdp = make_factored_mdp(rng, n_endo=3, exo_dims=(2, 2, 2, 2), relevant_dims=(2, 3))
    rep = verify_theorem1(mdp, (0, 1))
    assert rep.ok and rep.value_gap <= 1e-8 and rep.optimality_gap <= 1e-8


def test_explicit_reduced_policy(rng):
    mdp = make_factored_mdp(rng, n_endo=3, relevant_dims=(2, 3))
    red = reduce_mdp(mdp, (0, 1))
    pol = rng.integers(0, mdp.n_actions, red.reduced.n_states)
    rep = verify_theorem1(mdp, (0, 1), policy_on_reduced=pol)
    assert rep.ok and rep.optimality_gap is None


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_values_invariant_to_relabelling_masked_values(seed):
    rng = np.random.default_rng(seed)
    mdp, masked = random_conforming_instance(rng)
    d = masked[0]
    # swap the two values of masked dim d everywhere
    perm = [1, 0]
    ax = 1 + d
    p_endo = np.take(mdp.p_endo, perm, axis=ax)
    reward = np.take(mdp.reward, perm, axis=ax)
    chains = list(mdp.exo_chains)
    chains[d] = chains[d][np.ix_(perm, perm)]
    other = TabularMDP(mdp.n_endo, mdp.exo_dims, mdp.n_actions, p_endo, chains, reward,
                       mdp.gamma, mdp.relevant_dims, mdp.r_min, mdp.r_max)
    _, V1 = policy_iteration(mdp)
    _, V2 = policy_iteration(other)
    # state with masked value x in one MDP is state with value 1-x in the other
    idx = np.arange(mdp.n_states)
    mapped = np.array([other.state_index(s, tuple(1 - v if i == d else v for i, v in enumerate(e)))
                       for s, e in map(mdp.unravel, idx)])
    assert np.allclose(V1, V2[mapped], atol=1e-10)


def test_batch_of_conforming_instances():
    reports = batch_verify(30, seed=1)
    assert all(r.ok for r in reports)
    assert max(r.value_gap for r in reports) <= 1e-8
