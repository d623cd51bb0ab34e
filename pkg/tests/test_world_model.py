import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from hrssm import tensor as T
from hrssm.bisim import behavioral_target, cosine
from hrssm.gradcheck import build_small, check_firewalls, check_losses, synthetic_batch
from hrssm.nn import Linear
from hrssm.tensor import Tensor
from hrssm.world_model import (TwoHot, WorldModel, derangement, dyn_loss, latent_rec_loss,
                               pred_loss, sim_loss, symlog)
from hrssm.config import ModelConfig


# ---- free bits ----------------------------------------------------------------
def test_dyn_loss_floor_when_equal(f64, rng):
    logits = rng.normal(size=(3, 4, 8, 8))
    loss, info = dyn_loss(logits, logits.copy())
    assert float(loss.data) == pytest.approx(0.6, abs=1e-15)
    assert info["kl"] == pytest.approx(0.0, abs=1e-15)


def test_dyn_loss_floor_when_both_kls_below_one(f64, rng):
    post = rng.normal(size=(5, 8, 8)) * 0.3
    prior = rng.normal(size=(5, 8, 8)) * 0.3
    loss, info = dyn_loss(post, prior)
    assert 0 < info["kl"] < 1
    assert float(loss.data) == pytest.approx(0.6, abs=1e-15)


def _two_group_logits_with_kl(total_kl):
    # q uniform on two classes, p = (a, 1-a): KL = -0.5 ln(4 a (1 - a)) per group
    per = total_kl / 2
    a = brentq(lambda v: -0.5 * np.log(4 * v * (1 - v)) - per, 1e-9, 0.5 - 1e-12)
    post = np.zeros((1, 2, 2))
    prior = np.log(np.array([[[a, 1 - a], [a, 1 - a]]]))
    return post, prior


def test_dyn_loss_kl_two(f64):
    post, prior = _two_group_logits_with_kl(2.0)
    loss, info = dyn_loss(post, prior, unimix=0.0)
    assert info["kl"] == pytest.approx(2.0, abs=1e-12)
    assert float(loss.data) == pytest.approx(1.2, abs=1e-12)


def test_dyn_sg_posterior_term_has_no_posterior_gradient(f64, rng):
    post = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    prior = Tensor(rng.normal(size=(2, 3, 4)) * 3, requires_grad=True)
    loss, _ = dyn_loss(post, prior, free_nats=0.0, beta_dyn=0.5, beta_rep=0.0)
    loss.backward()
    assert post.grad is None or np.all(post.grad == 0.0)
    assert prior.grad is not None and np.abs(prior.grad).max() > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 5.0))
def test_dyn_loss_never_below_floor(seed, scale):
    r = np.random.default_rng(seed)
    with T.precision(64):
        loss, _ = dyn_loss(r.normal(size=(3, 4, 5)) * scale, r.normal(size=(3, 4, 5)) * scale)
    assert float(loss.data) >= 0.6 - 1e-12


# ---- latent reconstruction ---------------------------------------------------
def _identity_projection(d):
    proj = Linear(np.random.default_rng(0), d, d, bias=False)
    proj.w.data = np.eye(d)
    return proj


def test_rec_identical_is_zero(f64, rng):
    x = rng.normal(size=(4, 6))
    proj = Linear(rng, 6, 3, bias=False)
    assert float(latent_rec_loss(Tensor(x), Tensor(x), proj).data) == pytest.approx(0.0, abs=1e-15)


def test_rec_opposite_vectors(f64, rng):
    d = 7
    v = rng.normal(size=(3, d))
    loss = latent_rec_loss(Tensor(v), Tensor(-v), _identity_projection(d))
    assert float(loss.data) == pytest.approx(4.0 / d, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_rec_scale_invariance(seed, ca, cb):
    r = np.random.default_rng(seed)
    with T.precision(64):
        proj = Linear(r, 6, 4, bias=False)
        a, b = r.normal(size=(3, 6)), r.normal(size=(3, 6))
        base = float(latent_rec_loss(Tensor(a), Tensor(b), proj).data)
        scaled = float(latent_rec_loss(Tensor(ca * a), Tensor(cb * b), proj).data)
    assert scaled == pytest.approx(base, rel=1e-9, abs=1e-12)


def test_rec_raw_side_gets_no_gradient(f64, rng):
    raw = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    msk = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    latent_rec_loss(raw, msk, Linear(rng, 5, 3, bias=False)).backward()
    assert raw.grad is None and msk.grad is not None


# ---- similarity ---------------------------------------------------------------
def test_sim_zero_at_fixed_point(f64, rng):
    v = rng.normal(size=(4, 5))
    loss = sim_loss(Tensor(v), Tensor(v * 2.0), np.ones(4), np.ones(4), v, v * 3.0, 0.9)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-20)


def test_sim_residual_on_reference_example():
    u, v = np.array([1, 2, 3, 1, 1.0]), np.array([2, 1, 1, 1, 1.0])
    un, vn = np.array([2, 2, 1, 1, 1.0]), np.array([1, 1, 2, 1, 1.0])
    target = behavioral_target(0.03, 0.02, cosine(un, vn, "similarity"), 0.92)
    residual = (cosine(u, v, "similarity") - target) ** 2
    assert residual == pytest.approx(1e-6, rel=0.2)


def test_sim_next_inputs_get_no_gradient(f64, rng):
    na = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    nb = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    ca = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    sim_loss(ca, Tensor(rng.normal(size=(3, 4))), np.zeros(3), np.ones(3), na, nb, 0.9).backward()
    assert na.grad is None and nb.grad is None and ca.grad is not None


def test_sim_pairing_length_mismatch(rng):
    with pytest.raises(ValueError):
        sim_loss(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(2, 4))), np.zeros(3),
                 np.zeros(3), rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), 0.9)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2 ** 31))
def test_derangement_has_no_fixed_points(n, seed):
    p = derangement(n, np.random.default_rng(seed))
    assert sorted(p) == list(range(n)) and not np.any(p == np.arange(n))


# ---- prediction -----------------------------------------------------------------
def test_twohot_zero_on_center_bin():
    enc = TwoHot(41).encode(np.array([0.0]))[0]
    assert enc[20] == 1.0 and enc.sum() == 1.0


def test_twohot_reward_one_interpolates():
    enc = TwoHot(41).encode(np.array([1.0]))[0]
    y = np.log(2.0)
    # bins are 0.5 apart; ln 2 lies between 0.5 (index 21) and 1.0 (index 22)
    assert enc[21] == pytest.approx((1.0 - y) / 0.5, abs=1e-12)
    assert enc[22] == pytest.approx((y - 0.5) / 0.5, abs=1e-12)
    assert np.count_nonzero(enc) == 2


def test_twohot_clamps_and_counts():
    th = TwoHot(41)
    enc = th.encode(np.array([1e6, -1e6, 0.3]))
    assert th.clamped == 2
    assert enc[0, -1] == 1.0 and enc[1, 0] == 1.0


def test_twohot_decode_roundtrip():
    th = TwoHot(41)
    vals = np.array([-3.0, 0.0, 0.7, 12.0])
    logits = np.log(th.encode(vals) + 1e-300)
    assert np.allclose(th.decode(logits), vals, rtol=1e-9)
    assert np.allclose(symlog(np.array([np.e - 1])), 1.0)


def test_continue_bce_saturates(f64):
    th = TwoHot(41)
    _, bce = pred_loss(Tensor(np.zeros((2, 41))), Tensor(np.array([60.0, -60.0])),
                       np.zeros(2), np.array([1.0, 0.0]), th)
    assert float(bce.data) < 1e-20


# ---- whole model ----------------------------------------------------------------
def test_breakdown_sums_to_total(f64):
    wm, batch, masked, _ = build_small(0, latent_mode="sample", free_nats=1.0)
    total, bd, _ = wm.total_loss(batch, masked, np.random.default_rng(0))
    assert bd.dyn + bd.rec + bd.sim + bd.pred == pytest.approx(bd.total, abs=1e-12)
    assert float(total.data) == bd.total
    assert bd.pred == pytest.approx(bd.reward_nll + bd.cont_bce, abs=1e-12)


def test_loss_gradients_match_finite_differences():
    failed = [(r.name, r.error) for r in check_losses(0) if not r.passed]
    assert not failed


def test_gradient_firewalls():
    failed = [(r.name, r.note) for r in check_firewalls(1) if not r.passed]
    assert not failed


def test_ema_update_arithmetic(f64):
    wm, *_ = build_small(0)
    pairs = wm.ema_pairs()
    on, em = pairs[0]
    on.data = np.full_like(on.data, 2.0)
    em.data = np.full_like(em.data, 1.0)
    wm.ema_update(0.01)
    assert np.allclose(em.data, 1.01, rtol=0, atol=1e-15)
    snapshot = [e.data.copy() for _, e in pairs]
    wm.ema_update(0.0)
    assert all(np.array_equal(s, e.data) for s, (_, e) in zip(snapshot, pairs))
    wm.ema_update(1.0)
    assert all(np.array_equal(o.data, e.data) for o, e in pairs)


def test_ema_twin_mirrors_online():
    wm = WorldModel(ModelConfig(deter=8, groups=2, classes=3, embed=8, hidden=8, proj=4),
                    (4, 4, 1), 5, seed=0)
    for on, em in wm.ema_pairs():
        assert on.shape == em.shape and not em.requires_grad


def test_branch_collapse(f64):
    wm, batch, _, noise = build_small(3, latent_mode="sample")
    wm.copy_to_ema()
    terms, info, ro = wm.loss_terms(batch, batch["obs"], None, noise)
    assert abs(float(terms["rec"].data)) <= 1e-10
    assert np.array_equal(ro.post_logits.data, ro.raw_post_logits)
    assert np.array_equal(ro.z.data, ro.raw_z)


def test_recurrent_state_reads_previous_action(f64):
    wm, batch, masked, noise = build_small(0)
    ro1 = wm.rollout(batch["obs"], masked, batch["action"], batch["is_first"], noise[0], noise[1])
    act = batch["action"].copy()
    act[1, 2] = np.roll(act[1, 2], 1)
    ro2 = wm.rollout(batch["obs"], masked, act, batch["is_first"], noise[0], noise[1])
    assert np.array_equal(ro1.h.data[1, :2], ro2.h.data[1, :2])
    assert not np.allclose(ro1.h.data[1, 2], ro2.h.data[1, 2])


def test_zero_length_rollout(f64):
    wm, batch, masked, _ = build_small(0)
    B = batch["obs"].shape[0]
    ro = wm.rollout(batch["obs"][:, :0], masked[:, :0], batch["action"][:, :0],
                    batch["is_first"][:, :0], np.zeros((B, 0, 2)), np.zeros((B, 0, 2)))
    assert ro.h.shape[1] == 0 and ro.z.shape[1] == 0


def test_rollout_shape_mismatch(f64):
    wm, batch, masked, noise = build_small(0)
    with pytest.raises(ValueError):
        wm.rollout(batch["obs"], masked, batch["action"][:, :2], batch["is_first"], *noise[:2])


def test_one_hot_latents_in_sample_mode(f64):
    wm, batch, masked, noise = build_small(0, latent_mode="sample")
    ro = wm.rollout(batch["obs"], masked, batch["action"], batch["is_first"], *noise[:2])
    z = ro.z.data.reshape(*ro.z.shape[:2], 2, 3)
    assert np.all(z.sum(-1) == 1.0) and set(np.unique(z)) <= {0.0, 1.0}


def test_loss_breakdown_deterministic():
    def run():
        with T.precision(64):
            wm, batch, masked, _ = build_small(5, latent_mode="sample")
            return wm.total_loss(batch, masked, np.random.default_rng(11))[1].as_dict()

    assert run() == run()


def test_train_step_moves_ema_by_rule(f64):
    from hrssm.nn import Adam
    wm, batch, masked, _ = build_small(2, latent_mode="sample")
    before = {id(e): (o.data.copy(), e.data.copy()) for o, e in wm.ema_pairs()}
    opt = Adam(wm.online_parameters(), 1e-3)
    wm.train_step(batch, masked, np.random.default_rng(0), opt)
    m = wm.cfg.ema_m
    for o, e in wm.ema_pairs():
        _, e0 = before[id(e)]
        assert np.allclose(e.data, m * o.data + (1 - m) * e0, atol=1e-14)
