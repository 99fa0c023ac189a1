"""Command line driver for the experiment pipeline.

Subcommands mirror the pipeline stages::

    lpvrom generate --config exp.toml        # plant, trims, training data, Gramians
    lpvrom fit      --config exp.toml        # grid ROMs per (algorithm, order)
    lpvrom eval     --config exp.toml        # prediction-error tables
    lpvrom mpc      --config exp.toml        # closed-loop cost study
    lpvrom report   --config exp.toml        # merge result tables

Exit codes: 0 success, 2 configuration error, 3 numerical error, 4 missing
prerequisite (a stage was skipped).
"""

import argparse
import sys

from .errors import ConfigError, MissingPrerequisiteError, ToolkitError
from .experiment import load_config, run_eval, run_fit, run_generate, run_mpc, run_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_PREREQUISITE = 4


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lpvrom",
        description="Data-driven reduced-order LPV modeling experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("generate", "build the plant, trims, training data, and Gramian cache"),
        ("fit", "fit grid ROMs for every configured algorithm and order"),
        ("eval", "prediction-error sweeps over the configured scenarios"),
        ("mpc", "closed-loop MPC cost study"),
        ("report", "merge result tables into one CSV"),
    ):
        cmd = sub.add_parser(name, help=doc)
        cmd.add_argument("--config", required=True, help="experiment TOML file")
        cmd.add_argument("--out", default=None, help="output directory (overrides config)")
        cmd.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
        cmd.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, out_override=args.out, seed_override=args.seed)
        if args.command == "generate":
            run_generate(cfg)
        elif args.command == "fit":
            run_fit(cfg, jobs=args.jobs)
        elif args.command == "eval":
            run_eval(cfg, jobs=args.jobs)
        elif args.command == "mpc":
            run_mpc(cfg, jobs=args.jobs)
        elif args.command == "report":
            run_report(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQUISITE
    except ToolkitError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
