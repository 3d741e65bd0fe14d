"""Command-line entry point.

Verbs: run, finetune, stats, plotdata, validate-config. Exit codes: 0 on
success, 1 for usage/config problems, 2 for data problems, 3 when a whole
experiment arm fails.
"""

from __future__ import annotations

import argparse
import sys

from .errors import (
    CheckpointError,
    ConfigError,
    ConvevoError,
    FormatError,
    RunFailure,
    SplitSizeError,
)
from .experiments import (
    collect_plotdata,
    finetune_report,
    parse_experiment_config,
    run_experiment,
    stats_report,
)

USAGE_ERROR = 1
DATA_ERROR = 2
RUN_ERROR = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convevo",
        description="Evolve small convolutional classifiers and compare arms.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    run_p = sub.add_parser("run", help="execute every run of an experiment config")
    run_p.add_argument("--config", required=True, help="experiment config file")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.add_argument("--force", action="store_true", help="reuse a non-empty output dir")
    run_p.add_argument("--seed", type=int, default=None, help="override the base seed")
    run_p.add_argument(
        "--arm", action="append", default=None, help="run only this arm (repeatable)"
    )
    run_p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    fine_p = sub.add_parser(
        "finetune", help="fine-tune and test saved checkpoints of a finished experiment"
    )
    fine_p.add_argument("--config", required=True)
    fine_p.add_argument("--out", required=True)

    stats_p = sub.add_parser("stats", help="pairwise one-sided U tests between arms")
    stats_p.add_argument("--out", required=True)
    stats_p.add_argument(
        "--metric",
        default="test_accuracy",
        choices=("test_accuracy", "best_val_fitness"),
    )

    plot_p = sub.add_parser("plotdata", help="rebuild curve CSVs from stored run logs")
    plot_p.add_argument("--out", required=True)

    val_p = sub.add_parser("validate-config", help="parse and check a config file")
    val_p.add_argument("--config", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 0 for --help, 2 for usage errors
        return 0 if exc.code == 0 else USAGE_ERROR

    try:
        if args.verb == "run":
            cfg = parse_experiment_config(args.config)
            result = run_experiment(
                cfg,
                args.out,
                force=args.force,
                seed_override=args.seed,
                arm_names=args.arm,
                jobs=args.jobs,
            )
            print(f"completed {len(result.run_rows)} runs")
            for path in result.files:
                print(path)
            if result.failure_rows:
                print(f"{len(result.failure_rows)} run(s) failed; see failures.csv")
        elif args.verb == "finetune":
            cfg = parse_experiment_config(args.config)
            result = finetune_report(cfg, args.out)
            print(f"fine-tuned {len(result.finetune_rows)} checkpoint(s)")
            for path in result.files:
                print(path)
        elif args.verb == "stats":
            rows = stats_report(args.out, metric=args.metric)
            for row in rows:
                print(
                    f"{row['metric']} @{row['checkpoint']}: {row['arm_a']} > "
                    f"{row['arm_b']}: U={row['u_statistic']:g} p={row['p_value']:.6g}"
                )
            if not rows:
                print("nothing to compare (fewer than two arms with results)")
        elif args.verb == "plotdata":
            for path in collect_plotdata(args.out):
                print(path)
        elif args.verb == "validate-config":
            parse_experiment_config(args.config)
            print(f"{args.config}: OK")
    except (ConfigError,) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (FormatError, SplitSizeError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except (RunFailure,) as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return RUN_ERROR
    except ConvevoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUN_ERROR
    return 0


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
