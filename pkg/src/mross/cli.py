"""Command-line entry point: ``mross {mse,coverage,timing,fit}``."""

from __future__ import annotations

import argparse
import sys

from .data import read_csv, substream
from .estimator import CLASSIC_THRESHOLDS, eta_threshold, fit_mross
from .harness import ConfigError, load_config, run_coverage, run_mse, run_timing
from .losses import LossSpec


def _common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.add_argument("--workers", type=int)
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mross", description="Multi-resolution subsampling for linear classifiers")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("mse", "MSE per method and budget"),
                        ("coverage", "interval coverage and length"),
                        ("timing", "wall-clock time per fit")):
        _common(sub.add_parser(name, help=help_))
    fit = sub.add_parser("fit", help="fit a CSV file and print estimates with intervals")
    _common(fit)
    fit.add_argument("csv", help="numeric CSV file, one labeled point per row")
    fit.add_argument("--label-column", type=int, default=0)
    fit.add_argument("--loss", choices=("logistic", "squared_hinge", "dwd"), default="logistic")
    fit.add_argument("--gamma", type=float, default=0.5)
    fit.add_argument("--r0", type=int, default=1000)
    fit.add_argument("--r", type=float, default=2000)
    fit.add_argument("--threshold", help="number, 'eta' (default) or 'classic'", default="eta")
    fit.add_argument("--level", type=float, default=0.95)
    return parser


def _print_table(table, out):
    if not table:
        return
    keys = list(table[0])
    print(",".join(keys), file=out)
    for row in table:
        print(",".join(str(row[k]) for k in keys), file=out)


def _fit(args) -> int:
    loss = LossSpec(args.loss, args.gamma)
    if args.threshold == "eta":
        C = eta_threshold(loss)
    elif args.threshold == "classic":
        C = CLASSIC_THRESHOLDS.get(loss.kind)
        if C is None:
            raise ConfigError(f"no classic fixed threshold for {loss}")
    else:
        C = float(args.threshold)
    stream = read_csv(args.csv, label_column=args.label_column)
    rng = substream(args.seed or 0, "fit")
    est = fit_mross(stream, loss, args.r0, args.r, rng, threshold=C, level=args.level)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        print("coord,theta,lo,hi", file=out)
        for j, (t, (lo, hi)) in enumerate(zip(est.theta, est.intervals)):
            print(f"{j},{float(t)!r},{float(lo)!r},{float(hi)!r}", file=out)
    finally:
        if args.out:
            out.close()
    d = est.diagnostics
    print(f"# converged={est.report.converged} realized_r={d['realized_r']} n_plus={d['n_plus']} "
          f"n_minus={d['n_minus']} n_s={d['n_s']} C={C:.4g}", file=sys.stderr)
    return 0 if est.report.converged else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "fit":
            return _fit(args)
        config = load_config(args.config, args.profile, seed=args.seed, out=args.out, workers=args.workers)
        runner = {"mse": run_mse, "coverage": run_coverage, "timing": run_timing}[args.command]
        table = runner(config)
    except (ValueError, FileNotFoundError) as exc:  # ConfigError is a ValueError
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not args.out:
        _print_table(table, sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
