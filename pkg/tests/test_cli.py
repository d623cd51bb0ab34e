import json
import time

import pytest

from hrssm.cli import SUMMARY_PREFIX, main


def _summary(out: str) -> dict:
    lines = [l for l in out.splitlines() if l.startswith(SUMMARY_PREFIX)]
    return json.loads(lines[-1][len(SUMMARY_PREFIX):])


TINY = ["--set", "model.deter=16", "--set", "model.embed=32", "--set", "model.hidden=16",
        "--set", "agent.hidden=16", "--set", "trainer.prefill=64",
        "--set", "trainer.total_env_steps=128", "--set", "trainer.checkpoint_every=8"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--seed", "3", "--out", str(out)] + TINY) == 0
    return out


def test_smoke_train_is_fast(tmp_path):
    t0 = time.perf_counter()
    assert main(["train", "--smoke", "--out", str(tmp_path)]) == 0
    assert time.perf_counter() - t0 < 60
    assert (tmp_path / "checkpoints" / "final" / "manifest.json").exists()
    assert (tmp_path / "config.ini").exists()


def test_default_out_dir_uses_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("HRSSM_OUT", str(tmp_path))
    assert main(["train", "--seed", "4"] + TINY) == 0
    dirs = list(tmp_path.iterdir())
    assert len(dirs) == 1 and dirs[0].name.startswith("seed4-")


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    rc = main(["train", "--out", str(tmp_path), "--set", "model.no_such_key=1"])
    assert rc == 2 and "no_such_key" in capsys.readouterr().err


def test_invalid_value_is_a_config_error(tmp_path, capsys):
    rc = main(["train", "--out", str(tmp_path), "--set", "mask.mask_ratio=1.5"])
    assert rc == 2 and "mask_ratio" in capsys.readouterr().err


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    out = capsys.readouterr().out
    assert "model.lr = 0.0001" in out and "mask.mask_ratio = 0.5" in out


def test_eval_zero_episodes(run_dir, capsys):
    assert main(["eval", str(run_dir / "checkpoints" / "final"), "--episodes", "0"]) == 0
    s = _summary(capsys.readouterr().out)
    assert s["episodes"] == 0 and s["mean"] is None


def test_eval_untrained_policy_near_zero(run_dir, tmp_path, capsys):
    out = tmp_path / "eval.json"
    assert main(["eval", str(run_dir / "checkpoints" / "final"), "--episodes", "3",
                 "--out", str(out)]) == 0
    s = _summary(capsys.readouterr().out)
    assert s["episodes"] == 3 and abs(s["mean"]) <= 1.0
    assert json.loads(out.read_text())["episodes"] == 3


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", str(tmp_path / "nope")]) == 2


def test_export_writes_csv_and_figures(run_dir, tmp_path, capsys):
    assert main(["export", str(run_dir), "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "metrics.csv").read_text().strip().splitlines()
    n = len((run_dir / "metrics.jsonl").read_text().strip().splitlines())
    assert len(rows) == n + 1 and rows[0].startswith("step,env_steps")
    assert (tmp_path / "losses.png").stat().st_size > 0
    assert _summary(capsys.readouterr().out)["rows"] == n


def test_verify_counterexample(capsys):
    assert main(["verify", "counterexample"]) == 0
    out = capsys.readouterr().out
    assert "0.7955" in out and out.strip().endswith("PASS")


def test_verify_suites_small(capsys):
    assert main(["verify", "theorem1", "--instances", "5"]) == 0
    assert _summary(capsys.readouterr().out)["instances"] == 5
    assert main(["verify", "bisim", "--instances", "5"]) == 0


def test_grad_check_passes(capsys):
    assert main(["grad-check"]) == 0
    s = _summary(capsys.readouterr().out)
    assert s["ok"] and s["max_error"] <= 1e-4
