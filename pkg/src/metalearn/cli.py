"""Command-line entry point: run, grad-check, sweep, bounds, bench."""

from __future__ import annotations

import argparse
import dataclasses
import sys

from . import harness, plotting
from .core import NumericError
from .gradcheck import run_checks
from .meta_algorithms import InnerConfig, OuterConfig

BENCH_DEFAULTS = {
    "sinusoid": harness.ExperimentConfig(
        benchmark="sinusoid", algorithm="maml", K=100, n_train=10, n_val=10, log_every=100,
        inner=InnerConfig(alpha=0.02, n_steps=5),
        outer=OuterConfig(beta=3e-3, meta_batch_size=10, n_meta_iters=1000, optimizer="adam")),
    "demod": harness.ExperimentConfig(
        benchmark="demod", algorithm="maml", K=500, n_train=8, n_val=64, n_test_tasks=30,
        log_every=300, inner=InnerConfig(alpha=0.1, n_steps=1),
        outer=OuterConfig(beta=1e-3, meta_batch_size=8, n_meta_iters=3000, optimizer="adam")),
    "chanpred": harness.ExperimentConfig(
        benchmark="chanpred", algorithm="lstd", K=50, n_train=4, n_test_tasks=20),
}


def _parser():
    p = argparse.ArgumentParser(prog="metalearn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment from a TOML config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--no-plot", action="store_true")

    g = sub.add_parser("grad-check", help="finite-difference oracle suites")
    g.add_argument("--scope", default="all")
    g.add_argument("--instances", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sweep", help="one run per value of an axis, consolidated CSV")
    s.add_argument("config")
    s.add_argument("--axis", required=True, choices=sorted(harness.SWEEP_AXES))
    s.add_argument("--values", required=True, help="comma-separated, may be empty")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--no-plot", action="store_true")

    b = sub.add_parser("bounds", help="enumerated gaps against bounds on random environments")
    b.add_argument("config")
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.add_argument("--no-plot", action="store_true")

    e = sub.add_parser("bench", help="built-in benchmark configuration")
    e.add_argument("benchmark", choices=sorted(BENCH_DEFAULTS))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="results")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--no-plot", action="store_true")
    return p


def _override(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, output=args.out)
    return cfg


def _values(text):
    return [v for v in (t.strip() for t in text.split(",")) if v]


def _report(res, plot):
    print(f"wrote {res.csv_path}")
    if plot:
        print(f"wrote {plotting.plot_run(res.csv_path, res.config.benchmark)}")
    for k, v in sorted(res.summary.items()):
        print(f"  {k}: {v}")


def _run(args):
    if args.command == "grad-check":
        try:
            results = run_checks(args.scope, args.instances, args.seed)
        except ValueError as err:
            raise harness.ConfigError(str(err)) from None
        for r in results:
            print(f"{r.name:<12} worst rel. error {r.worst:.3e}  "
                  f"({r.n_instances} instances)  {'PASS' if r.passed else 'FAIL'}")
        return harness.EXIT_OK if all(r.passed for r in results) else harness.EXIT_ORACLE
    if args.command == "bench":
        cfg = dataclasses.replace(BENCH_DEFAULTS[args.benchmark], seed=args.seed,
                                  output=args.out)
        _report(harness.run_experiment(cfg, workers=args.workers), not args.no_plot)
        return harness.EXIT_OK
    cfg = _override(harness.load_config(args.config), args)
    if args.command == "run":
        _report(harness.run_experiment(cfg, workers=args.workers), not args.no_plot)
        return harness.EXIT_OK
    if args.command == "bounds":
        if cfg.benchmark != "bounds":
            raise harness.ConfigError(f"benchmark: expected 'bounds', got {cfg.benchmark!r}")
        res = harness.run_experiment(cfg)
        _report(res, not args.no_plot)
        return harness.EXIT_OK if res.summary["violations"] == 0 else harness.EXIT_ORACLE
    path, summaries = harness.sweep(cfg, args.axis, _values(args.values), workers=args.workers)
    print(f"wrote {path}")
    if summaries and not args.no_plot:
        print(f"wrote {plotting.plot_sweep(path, args.axis, harness.COLUMNS[cfg.benchmark][2])}")
    for s in summaries:
        print("  " + ", ".join(f"{k}={v}" for k, v in s.items()))
    return harness.EXIT_OK


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        return _run(args)
    except harness.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return harness.EXIT_CONFIG
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return harness.EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
