"""Command-line entry point: ``hrssm {train,eval,verify,grad-check,export}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .config import (ConfigError, describe_defaults, load_config, parse_override, set_key,
                     smoke_config)

OUT_ENV = "HRSSM_OUT"
SUMMARY_PREFIX = "SUMMARY "

log = logging.getLogger("hrssm")


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _summary(payload: dict) -> None:
    print(SUMMARY_PREFIX + json.dumps(payload, sort_keys=True))


# ---- train ----
def cmd_train(args) -> int:
    from .trainer import Trainer

    try:
        if args.smoke:
            cfg = smoke_config(args.seed if args.seed is not None else 0)
            if args.config:
                raise ConfigError("--config", "cannot be combined with --smoke")
            for ov in args.set:
                set_key(cfg, *parse_override(ov))
            cfg.validate()
        else:
            cfg = load_config(args.config, args.set, args.seed)
        if args.precision is not None:
            set_key(cfg, "trainer.precision", str(args.precision))
            cfg.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else _out_root() / f"seed{cfg.seed}-{cfg.digest()}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text())
    tr = Trainer(cfg, out)
    if args.resume:
        tr.load_checkpoint(args.resume)
    last = {}

    def progress(rec):
        last.update(rec)
        if rec["step"] % 100 == 0:
            log.info("step %d env_steps %d total %.4f", rec["step"], rec["env_steps"], rec["total"])

    t0 = time.perf_counter()
    tr.run(on_record=progress)
    print(f"finished: {tr.train_steps} train steps, {tr.env_steps} env steps "
          f"in {time.perf_counter() - t0:.1f}s")
    print(f"metrics: {out / 'metrics.jsonl'}")
    print(f"checkpoint: {out / 'checkpoints' / 'final'}")
    return 0


# ---- eval ----
def cmd_eval(args) -> int:
    from .trainer import Trainer, evaluate, load_checkpoint, summarize_returns

    ckpt = Path(args.checkpoint)
    try:
        manifest, _ = load_checkpoint(ckpt)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    cfg = load_config(text=manifest["config"])
    tr = Trainer(cfg)
    tr.load_checkpoint(ckpt)
    returns = evaluate(tr, args.episodes, args.seed, greedy=not args.sample)
    summ = summarize_returns(returns)
    for i, r in enumerate(returns):
        print(f"episode {i:4d} return {r:+.4f}")
    if summ["episodes"]:
        print(f"mean {summ['mean']:+.4f}  median {summ['median']:+.4f}  IQR {summ['iqr']:.4f}")
    else:
        print("no episodes requested; empty report")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps({"returns": returns, **summ}, sort_keys=True, indent=1))
    _summary(summ)
    return 0


# ---- verify ----
def _verify_counterexample() -> bool:
    from .bisim import reproduce_counterexample

    t0 = time.perf_counter()
    rep = reproduce_counterexample()
    print("== counterexample: similarity matching without endogenous reduction ==")
    for line in rep.lines():
        print(line)
    _summary({"suite": "counterexample", "ok": rep.ok, "full_sim": rep.full_sim,
              "full_target": rep.full_target, "endo_sim": rep.endo_sim,
              "endo_target": rep.endo_target, "seconds": round(time.perf_counter() - t0, 3)})
    return rep.ok


def _verify_bisim(n: int, seed: int) -> bool:
    from .bisim import batch_bisim

    ok = _verify_counterexample()
    t0 = time.perf_counter()
    reports = batch_bisim(n, seed)
    print("== bisimulation fixed point on random tabular MDPs ==")
    print(f"{'#':>4} {'states':>6} {'sweeps':>6} {'residual':>10} {'diameter':>12} {'bound':>12} "
          f"{'twin d':>10} ok")
    for i, r in enumerate(reports):
        td = "-" if r.twin_distance is None else f"{r.twin_distance:.2e}"
        print(f"{i:>4} {r.n_states:>6} {r.iterations:>6} {r.residual:>10.2e} "
              f"{r.diameter.diameter:>12.6f} {r.diameter.bound:>12.6f} {td:>10} "
              f"{'PASS' if r.ok else 'FAIL'}")
    passed = all(r.ok for r in reports)
    twins = [r.twin_distance for r in reports if r.twin_distance is not None]
    _summary({"suite": "bisim", "ok": passed, "instances": len(reports),
              "failures": sum(not r.ok for r in reports),
              "max_sweeps": max((r.iterations for r in reports), default=0),
              "max_residual": max((r.residual for r in reports), default=0.0),
              "max_twin_distance": max(twins, default=0.0),
              "seconds": round(time.perf_counter() - t0, 3)})
    return ok and passed


def _verify_theorem1(n: int, seed: int) -> bool:
    from .theory import batch_verify

    t0 = time.perf_counter()
    reports = batch_verify(n, seed)
    print("== masked-MDP value equivalence on conforming factored MDPs ==")
    print(f"{'#':>4} {'|S|':>5} {'|S_red|':>7} {'value gap':>11} {'opt gap':>11} ok")
    for i, r in enumerate(reports):
        og = "-" if r.optimality_gap is None else f"{r.optimality_gap:.2e}"
        print(f"{i:>4} {r.n_full:>5} {r.n_reduced:>7} {r.value_gap:>11.2e} {og:>11} "
              f"{'PASS' if r.ok else 'FAIL'}")
    passed = all(r.ok for r in reports)
    _summary({"suite": "theorem1", "ok": passed, "instances": len(reports),
              "max_value_gap": max((r.value_gap for r in reports), default=0.0),
              "max_optimality_gap": max((r.optimality_gap or 0.0 for r in reports), default=0.0),
              "seconds": round(time.perf_counter() - t0, 3)})
    return passed


def cmd_verify(args) -> int:
    suites = {"counterexample": lambda: _verify_counterexample(),
              "bisim": lambda: _verify_bisim(args.instances, args.seed),
              "theorem1": lambda: _verify_theorem1(args.instances, args.seed)}
    if args.suite == "all":
        results = {"theorem1": suites["theorem1"](), "bisim": suites["bisim"]()}
        ok = all(results.values())
        _summary({"suite": "all", "ok": ok, "results": results})
    else:
        ok = suites[args.suite]()
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


# ---- grad-check ----
def cmd_grad_check(args) -> int:
    from .gradcheck import TOL, run_all

    results = run_all(args.seed)
    width = max(len(r.name) for r in results)
    print(f"{'check':<{width}}  {'max rel err':>11}  result")
    for r in results:
        note = f"  {r.note}" if r.note else ""
        print(f"{r.name:<{width}}  {r.error:>11.3e}  {'PASS' if r.passed else 'FAIL'}{note}")
    ok = all(r.passed for r in results)
    worst = max((r.error for r in results if r.name.startswith(("op:", "module:", "loss:"))),
                default=0.0)
    _summary({"ok": ok, "checks": len(results), "failures": sum(not r.passed for r in results),
              "max_error": worst, "tolerance": TOL})
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


# ---- export ----
def cmd_export(args) -> int:
    from .report import export
    from .trainer import read_metrics

    src = Path(args.metrics)
    if src.is_dir():
        src = src / "metrics.jsonl"
    if not src.exists():
        print(f"error: no metrics file at {src}", file=sys.stderr)
        return 2
    records = read_metrics(src)
    out = Path(args.out) if args.out else src.parent / "export"
    written = export(records, out)
    for kind, path in written.items():
        print(f"{kind}: {path}")
    _summary({"rows": len(records), "files": {k: str(v) for k, v in written.items()}})
    return 0


def build_parser() -> argparse.ArgumentParser:
    epilog = "configuration defaults (override with --set section.key=value):\n" + describe_defaults()
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="hrssm", description="Hybrid masked world-model toolkit.",
                                epilog=epilog, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train world model and agent", epilog=epilog,
                       formatter_class=fmt)
    t.add_argument("--config", help="INI config file; sections mirror module names")
    t.add_argument("--seed", type=int, default=None, help="run seed (overrides config)")
    t.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs, "
                                 "plus seed and config hash)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, repeatable")
    t.add_argument("--precision", type=int, choices=(32, 64), help="float width")
    t.add_argument("--smoke", action="store_true", help="short run for checking the pipeline")
    t.add_argument("--resume", help="checkpoint directory to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy-policy rollouts from a checkpoint")
    e.add_argument("checkpoint", help="checkpoint directory")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=12345, help="evaluation env seed")
    e.add_argument("--sample", action="store_true", help="sample actions instead of greedy")
    e.add_argument("--out", help="write the returns and summary as JSON here")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run theory verification suites")
    v.add_argument("suite", choices=("theorem1", "bisim", "counterexample", "all"))
    v.add_argument("--instances", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("grad-check", help="finite-difference gradient audit at 64-bit")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_grad_check)

    x = sub.add_parser("export", help="metrics stream to CSV and PNG figures")
    x.add_argument("metrics", help="metrics.jsonl file or run directory")
    x.add_argument("--out", help="output directory (default: <run>/export)")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "episodes", 0) is not None and getattr(args, "episodes", 0) < 0:
        print("error: --episodes must be >= 0", file=sys.stderr)
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
