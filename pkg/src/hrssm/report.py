"""Metric export: one CSV row per metrics record plus static PNG figures."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("total", "dyn", "rec", "sim", "pred")
AGENT_KEYS = ("return_mean", "value_mean", "last_episode_return")


def columns(records: list[dict]) -> list[str]:
    keys = set()
    for r in records:
        keys.update(r)
    lead = [k for k in ("step", "env_steps") if k in keys]
    return lead + sorted(keys - set(lead))


def write_csv(records: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = columns(records)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, restval="")
        w.writeheader()
        for r in records:
            w.writerow({k: ("" if r.get(k) is None else r.get(k, "")) for k in cols})
    return path


def _series(records, key):
    pts = [(r["step"], r[key]) for r in records if r.get(key) is not None]
    if not pts:
        return None, None
    x, y = zip(*pts)
    return np.asarray(x), np.asarray(y, dtype=float)


def _plot(records, keys, title, path, log_y=False) -> Path | None:
    fig, ax = plt.subplots(figsize=(6, 4))
    drawn = False
    for k in keys:
        x, y = _series(records, k)
        if x is None:
            continue
        ax.plot(x, y, label=k, linewidth=1)
        drawn = True
    if not drawn:
        plt.close(fig)
        return None
    ax.set_xlabel("train step")
    ax.set_title(title)
    if log_y:
        ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def export(records: list[dict], out_dir) -> dict:
    """Write ``metrics.csv``, ``losses.png`` and ``agent.png`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {"csv": write_csv(records, out / "metrics.csv")}
    for name, keys, title, log_y in (("losses", LOSS_KEYS, "world-model losses", True),
                                     ("agent", AGENT_KEYS, "returns and values", False)):
        p = _plot(records, keys, title, out / f"{name}.png", log_y)
        if p is not None:
            written[name] = p
    return written
