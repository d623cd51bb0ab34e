import json

import numpy as np
import pytest
from scipy.stats import chisquare

from hrssm import probes
from hrssm.config import RunConfig, set_key
from hrssm.trainer import (CheckpointError, ReplayBuffer, Trainer, load_checkpoint,
                           read_metrics, summarize_returns)


def tiny(seed=0, **over) -> RunConfig:
    cfg = RunConfig(seed=seed)
    for k, v in {"model.deter": 16, "model.embed": 32, "model.hidden": 16, "model.proj": 8,
                 "model.groups": 4, "model.classes": 4, "agent.hidden": 16, "agent.horizon": 4,
                 "trainer.batch_size": 4, "trainer.batch_length": 8, "trainer.prefill": 64,
                 "trainer.checkpoint_every": 10, **over}.items():
        set_key(cfg, k, str(v))
    cfg.validate()
    return cfg


# ---- replay -------------------------------------------------------------------
def _buf(cap=5):
    b = ReplayBuffer(cap, (1,), 1)
    return b


def test_replay_fifo_eviction():
    b = _buf(5)
    for i in range(8):
        b.push([i], [0], float(i), 1.0, i == 0)
    assert len(b) == 5 and b.total_pushed == 8
    assert list(b.ordered("reward")) == [3, 4, 5, 6, 7]


def test_replay_window_length_and_first_flag(rng):
    b = _buf(50)
    for i in range(50):
        b.push([i], [0], float(i), 1.0, i % 7 == 0)
    w = b.sample(6, 10, rng)
    assert w["obs"].shape == (6, 10, 1) and np.all(w["is_first"][:, 0])
    assert np.all(np.diff(w["reward"], axis=1) == 1)


def test_replay_needs_enough_steps(rng):
    b = _buf(10)
    b.push([0], [0], 0.0, 1.0, True)
    with pytest.raises(RuntimeError, match="prefill"):
        b.sample(1, 4, rng)


def test_replay_window_starts_uniform():
    b = _buf(40)
    for i in range(40):
        b.push([i], [0], float(i), 1.0, False)
    starts = b.sample(20000, 8, np.random.default_rng(5))["starts"]
    counts = np.bincount(starts, minlength=33)
    assert len(counts) == 33 and chisquare(counts).pvalue > 0.001


# ---- collection -----------------------------------------------------------------
def test_prefill_fills_buffer_with_uniform_actions():
    tr = Trainer(tiny(), None)
    tr.cfg.trainer.prefill = 500
    tr.run(total_env_steps=500)
    assert len(tr.replay) == 500 and tr.train_steps == 0
    first = tr.replay.ordered("is_first")
    acts = tr.replay.ordered("action")[~first].argmax(-1)
    counts = np.bincount(acts, minlength=tr.env.action_dim)
    assert chisquare(counts).pvalue > 0.001


def test_rewards_pass_through_unchanged():
    tr = Trainer(tiny(), None)
    outs = []
    tr.collect(300, random=True, sink=lambda *rec: outs.append(rec))
    got = [(r[2], r[3]) for r in outs]
    tr2 = Trainer(tiny(), None)
    assert got == tr2.collect(300, random=True)


# ---- determinism and checkpoints ------------------------------------------------------
def _run(cfg, steps, out=None):
    tr = Trainer(cfg, out)
    recs = []
    tr.run(total_env_steps=steps, on_record=recs.append)
    return tr, recs


def test_same_seed_identical_metric_streams(tmp_path):
    _run(tiny(), 64 + 80, tmp_path / "a")
    _run(tiny(), 64 + 80, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a and a == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_different_seed_differs():
    _, a = _run(tiny(0), 64 + 32)
    _, b = _run(tiny(1), 64 + 32)
    assert a != b


def test_checkpoint_round_trip_is_identical(tmp_path):
    tr, _ = _run(tiny(), 64 + 32)
    tr.save_checkpoint(tmp_path / "c1")
    tr2 = Trainer(tiny(), None)
    tr2.load_checkpoint(tmp_path / "c1")
    tr2.save_checkpoint(tmp_path / "c2")
    for f in ("manifest.json", "payload.bin"):
        assert (tmp_path / "c1" / f).read_bytes() == (tmp_path / "c2" / f).read_bytes()


def test_resume_matches_unbroken_run(tmp_path):
    total, cut = 64 + 160, 64 + 64
    _, full = _run(tiny(), total)
    tr, part = _run(tiny(), cut)
    tr.save_checkpoint(tmp_path / "mid")
    tr2 = Trainer(tiny(), None)
    tr2.load_checkpoint(tmp_path / "mid")
    rest = []
    tr2.run(total_env_steps=total, on_record=rest.append)
    enc = lambda recs: [json.dumps(r, sort_keys=True) for r in recs]
    assert enc(part + rest) == enc(full)


def test_shape_mismatch_rejected(tmp_path):
    tr, _ = _run(tiny(), 64 + 16)
    tr.save_checkpoint(tmp_path / "c")
    other = Trainer(tiny(**{"model.deter": 24}), None)
    with pytest.raises(CheckpointError, match="deter|recurrent"):
        other.load_checkpoint(tmp_path / "c")


def test_run_writes_metrics_and_final_checkpoint(tmp_path):
    _run(tiny(), 64 + 48, tmp_path)
    recs = read_metrics(tmp_path / "metrics.jsonl")
    assert [r["step"] for r in recs] == list(range(1, len(recs) + 1))
    manifest, arrays = load_checkpoint(tmp_path / "checkpoints" / "final")
    assert manifest["state"]["counters"]["train_steps"] == len(recs)
    assert len(list((tmp_path / "checkpoints").glob("step_*"))) <= 2


def test_summarize_returns():
    assert summarize_returns([])["mean"] is None
    s = summarize_returns([0.0, 1.0, 2.0, 3.0])
    assert s["mean"] == 1.5 and s["median"] == 1.5 and s["iqr"] == 1.5


@pytest.mark.slow
def test_distraction_free_loss_halves():
    ratios = []
    for seed in range(3):
        cfg = RunConfig(seed=seed)
        cfg.env.noise = "none"
        _, recs = _run(cfg, cfg.trainer.prefill + 2000 * 4)
        ratios.append(probes.smoothed(recs, 2000) / probes.smoothed(recs, 100))
    assert np.median(ratios) < 0.5
