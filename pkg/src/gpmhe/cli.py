"""Command-line interface.

Verbs: collect, train, estimate, compare, bounds.  One YAML config drives all
commands; --seed/--out/--estimators override scalar keys and the overrides
are recorded in the run-record snapshots.  Exit codes: 0 success, 2
configuration/usage error, 3 numerical error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .config import apply_overrides, load_config
from .errors import ConfigurationError, ContractViolationError, NumericalError


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpmhe",
        description="GP-based moving-horizon estimation: data collection, "
        "training, estimation runs, comparison and error-bound reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the YAML experiment config")
        cmd.add_argument("--out", default=None, help="output directory (overrides config)")
        return cmd

    add("collect", "simulate and store the offline trajectory sets")

    train = add("train", "train GP state-space models from collected data")
    train.add_argument("--sets", default=None,
                       help="comma-separated offline set names (default: all)")

    est = add("estimate", "run the configured estimators on simulated online data")
    est.add_argument("--seed", type=int, action="append", default=None,
                     help="Monte-Carlo seed (repeatable; overrides config seeds)")
    est.add_argument("--estimators", default=None,
                     help="comma-separated estimator names (overrides config)")

    comp = add("compare", "aggregate run records into RMSE tables and plot CSVs")
    comp.add_argument("--seed", type=int, action="append", default=None)

    bnd = add("bounds", "evaluate the stability error bounds on stored runs")
    bnd.add_argument("--seed", type=int, action="append", default=None)
    bnd.add_argument("--estimator", default=None,
                     help="estimator to audit (default: first configured)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(
            cfg,
            seeds=getattr(args, "seed", None),
            out=args.out,
            estimators=(
                args.estimators.split(",") if getattr(args, "estimators", None) else None
            ),
        )
        if args.command == "collect":
            paths = harness.cmd_collect(cfg)
            print(f"wrote {len(paths)} trajectory files to {cfg.output_dir}")
        elif args.command == "train":
            sets = args.sets.split(",") if args.sets else None
            bundles = harness.cmd_train(cfg, sets=sets)
            for name, path in sorted(bundles.items()):
                print(f"trained {name}: {path}")
        elif args.command == "estimate":
            paths = harness.cmd_estimate(cfg)
            print(f"wrote {len(paths)} run records to {cfg.output_dir}")
        elif args.command == "compare":
            summary = harness.cmd_compare(cfg)
            for name, stats in summary.items():
                print(
                    f"{name}: rmse_window mean={stats['mean_rmse_window']:.6g} "
                    f"std={stats['std_rmse_window']:.6g}"
                )
        elif args.command == "bounds":
            result = harness.cmd_bounds(cfg, estimator=args.estimator)
            print(
                f"bound violations: {result['violations']} "
                f"(mu={result['constants'].mu:.6g}, M_bar={result['constants'].m_bar})"
            )
        return 0
    except (ConfigurationError, ContractViolationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
