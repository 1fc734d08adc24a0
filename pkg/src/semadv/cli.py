"""Command-line interface for the experiment pipeline.

Each subcommand runs the staged pipeline up to (and including) one stage, so
``semadv attack -d runs/demo`` after ``semadv train-attrs -d runs/demo``
reuses every finished stage from the run directory's store.

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 threshold
check failure (``evaluate --min-asr/--min-source-rate``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import ConfigError, default_config, load_config
from .runner import (
    StageFailure,
    load_report,
    run_experiment,
    run_sweep,
    write_report,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_CHECK = 4

_STAGE_COMMANDS = {
    "gen-data": "data",
    "train-diffusion": "denoiser",
    "train-encoders": "encoders",
    "train-classifiers": "classifiers",
    "train-attrs": "attributes",
    "calibrate": "calibration",
    "attack": "attack",
    "evaluate": "evaluation",
}


def _add_common(parser: argparse.ArgumentParser, *, run_dir_required: bool = True) -> None:
    parser.add_argument("-c", "--config", type=Path, default=None, help="YAML config file; omit for the default profile")
    parser.add_argument("-d", "--run-dir", type=Path, required=run_dir_required, help="run directory for artifacts and reports")
    parser.add_argument("--seed", type=int, default=None, help="override the global seed")
    parser.add_argument("-w", "--workers", type=int, default=1, help="worker threads for per-sample stages")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semadv",
        description="Semantic-attribute adversarial generation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    descriptions = {
        "gen-data": "generate the synthetic captioned dataset",
        "train-diffusion": "train the denoiser (runs dataset stage first)",
        "train-encoders": "train the image/text encoder pair",
        "train-classifiers": "train the attacked and auxiliary classifiers",
        "train-attrs": "train the semantic attribute functions",
        "calibrate": "measure editing/boosting phase markers",
        "attack": "run the attack over the configured sample budget",
        "evaluate": "full pipeline: attack plus metrics and defenses",
    }
    for command, help_text in descriptions.items():
        cmd = sub.add_parser(command, help=help_text)
        _add_common(cmd)
        if command == "evaluate":
            cmd.add_argument("--min-asr", type=float, default=None, help="exit 4 if attack success rate falls below this")
            cmd.add_argument("--min-source-rate", type=float, default=None, help="exit 4 if the auxiliary model's source-class rate on successes falls below this")

    sweep = sub.add_parser("sweep", help="run the pipeline across one hyperparameter axis")
    _add_common(sweep)
    sweep.add_argument("--axis", required=True, choices=["lambda_1", "lambda_2", "lambda_adv", "gradient_source"])
    sweep.add_argument("--values", required=True, help="comma-separated axis values")

    report = sub.add_parser("report", help="re-emit and print the report of a finished run")
    report.add_argument("-d", "--run-dir", type=Path, required=True)
    return parser


def _load(args) -> "ExperimentConfig":
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _parse_values(axis: str, raw: str):
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError("sweep --values must name at least one value")
    if axis == "gradient_source":
        return parts
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"sweep values for {axis} must be numbers: {raw!r}") from exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in _STAGE_COMMANDS:
            cfg = _load(args)
            report = run_experiment(
                cfg,
                args.run_dir,
                until=_STAGE_COMMANDS[args.command],
                workers=args.workers,
            )
            for name, record in report.stages.items():
                status = "cached" if record.skipped else f"{record.seconds:.1f}s"
                print(f"{name}: {status}")
            for key in sorted(report.metrics):
                print(f"{key}: {report.metrics[key]:.6g}")
            if args.command == "evaluate":
                return _threshold_checks(args, report)
            return EXIT_OK

        if args.command == "sweep":
            cfg = _load(args)
            values = _parse_values(args.axis, args.values)
            rows = run_sweep(cfg, args.axis, values, args.run_dir, workers=args.workers)
            for row in rows:
                print(json.dumps(row, sort_keys=True))
            return EXIT_OK

        if args.command == "report":
            report = load_report(args.run_dir)
            path = write_report(report, args.run_dir)
            print(path.read_text())
            return EXIT_OK

        raise AssertionError(f"unhandled command {args.command!r}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE


def _threshold_checks(args, report) -> int:
    failures = []
    if args.min_asr is not None and report.metrics.get("asr", 0.0) < args.min_asr:
        failures.append(f"asr {report.metrics.get('asr'):.4f} < {args.min_asr}")
    if args.min_source_rate is not None:
        rate = report.metrics.get("g_source_rate_on_success", 0.0)
        if rate < args.min_source_rate:
            failures.append(f"g_source_rate_on_success {rate:.4f} < {args.min_source_rate}")
    if failures:
        for failure in failures:
            print(f"threshold check failed: {failure}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
