"""Command-line entry point: ``refusion <verb> --config <path> [overrides]``."""
from __future__ import annotations

import argparse
from collections.abc import Sequence
import functools
import logging
import sys

from . import __version__
from .config import SWEEP_AXES, VARIANTS, ExperimentConfig, load
from .const import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_PARTIAL_FAILURE
from .exceptions import ConfigError, RefusionError
from .model import AugmentationMode
from .pipeline import (
    PipelineResult,
    build_store_seed,
    eval_seed,
    flops_report_command,
    gen_task_seed,
    run_pipeline,
    run_stage,
    search_seed,
    sweep,
    verify_output_manifest,
)

_LOGGER = logging.getLogger(__name__)

# --mode picks the variant; Fusion keeps a fusion variant already chosen in the file
MODE_VARIANTS = {
    AugmentationMode.NONE: "baseline",
    AugmentationMode.CONCAT: "concat",
    AugmentationMode.FUSION: "ari-all",
}


def _csv_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _accuracy_text(value: float | str) -> str:
    return "-" if value == "" else f"{value:.4f}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refusion",
        description="Retrieval representation fusion experiments on a synthetic few-shot task.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="verb", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (dotted keys); defaults apply when omitted")
    common.add_argument("--seed", type=int, action="append", help="run only this seed (repeatable)")
    common.add_argument("--k", type=int, help="number of retrievals")
    common.add_argument("--mode", choices=[mode.value for mode in AugmentationMode], help="augmentation mode")
    common.add_argument("--variant", choices=sorted(VARIANTS), help="experiment variant")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="seeds run in parallel")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any other config key")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    subparsers.add_parser("gen-task", parents=[common], help="generate the synthetic task per seed")
    subparsers.add_parser("build-store", parents=[common], help="generate the task and build the vector store")
    subparsers.add_parser("train", parents=[common], help="full pipeline: (search ->) train -> eval per seed")
    subparsers.add_parser("search", parents=[common], help="architecture search only")
    evaluate = subparsers.add_parser("eval", parents=[common], help="evaluate saved checkpoints")
    evaluate.add_argument("--latency", type=int, default=0, metavar="SAMPLES", help="also measure latency")
    sweep_parser = subparsers.add_parser("sweep", parents=[common], help="one pipeline per axis value")
    sweep_parser.add_argument("--axis", choices=sorted(SWEEP_AXES))
    sweep_parser.add_argument("--values", type=_csv_list, help="comma-separated axis values")
    sweep_parser.add_argument("--variants", type=_csv_list, help="run every value once per listed variant")
    flops = subparsers.add_parser("flops-report", parents=[common], help="concat vs fusion FLOPs per k")
    flops.add_argument("--k-values", type=_csv_list, help="comma-separated k values")
    return parser


def overrides_from_args(args: argparse.Namespace, config: ExperimentConfig) -> dict[str, str]:
    """Dotted-key overrides requested on the command line."""
    overrides: dict[str, str] = {}
    if args.mode is not None:
        mode = AugmentationMode(args.mode)
        if mode is not config.model.augmentation:
            overrides["experiment.variant"] = MODE_VARIANTS[mode]
    if args.variant is not None:
        overrides["experiment.variant"] = args.variant
    if args.seed:
        overrides["experiment.seeds"] = ",".join(str(seed) for seed in args.seed)
    if args.k is not None:
        overrides["retrieval.k"] = str(args.k)
    if args.out is not None:
        overrides["experiment.output_dir"] = args.out
    if args.workers is not None:
        overrides["experiment.workers"] = str(args.workers)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load(args.config) if args.config else ExperimentConfig()
    overrides = overrides_from_args(args, config)
    return config.with_overrides(overrides) if overrides else config


def _report(result: PipelineResult) -> int:
    for outcome in result.outcomes:
        if outcome.ok:
            accuracy = "-" if outcome.accuracy is None else f"{outcome.accuracy:.4f}"
            print(f"seed {outcome.seed}: ok accuracy={accuracy}")
        else:
            print(f"seed {outcome.seed}: FAILED {outcome.error}")
    if result.mean is not None:
        print(f"{result.variant}: {result.mean:.4f} +/- {result.std:.4f} over {len(result.successful)} seed(s)")
    return EXIT_PARTIAL_FAILURE if result.partial_failure else EXIT_OK


def dispatch(args: argparse.Namespace, config: ExperimentConfig) -> int:
    if args.verb == "gen-task":
        return _report(run_stage(config, gen_task_seed))
    if args.verb == "build-store":
        return _report(run_stage(config, build_store_seed))
    if args.verb == "search":
        return _report(run_stage(config, search_seed))
    if args.verb == "eval":
        if args.latency > 0 and config.experiment.workers != 1:
            # latency timing holds a process-wide lock
            config = config.with_override("experiment.workers", "1")
        return _report(run_stage(config, functools.partial(eval_seed, latency_samples=args.latency)))
    if args.verb == "train":
        result = run_pipeline(config)
        missing = verify_output_manifest(config)
        if missing:
            _LOGGER.warning("Output manifest incomplete: %s", ", ".join(missing))
        return _report(result)
    if args.verb == "sweep":
        axis = args.axis or config.sweep.axis
        values = args.values or list(config.sweep.values)
        variants = args.variants or list(config.sweep.variants)
        outcome = sweep(config, axis, values, variants)
        for row in outcome.rows:
            if row["seed"] == "mean":
                accuracy, std = row["accuracy"] or "-", row["std"] or "-"
                print(
                    f"{row['variant']} {axis}={row['value']}: "
                    f"accuracy={accuracy} std={std} ({row['status']})"
                )
        return EXIT_PARTIAL_FAILURE if outcome.partial_failure else EXIT_OK
    if args.verb == "flops-report":
        try:
            k_values = [int(value) for value in args.k_values] if args.k_values else None
        except ValueError as err:
            raise ConfigError(f"--k-values must be integers: {err}") from err
        for row in flops_report_command(config, k_values):
            accuracy = ""
            if row["rc_accuracy"] != "" or row["rf_accuracy"] != "":
                rc, rf = _accuracy_text(row["rc_accuracy"]), _accuracy_text(row["rf_accuracy"])
                accuracy = f" accuracy rc={rc} rf={rf}"
            print(
                f"k={row['k']}: rc={row['rc_flops']} (len {row['rc_seq_len']}) "
                f"rf={row['rf_flops']} (len {row['rf_seq_len']}){accuracy}"
            )
        return EXIT_OK
    raise ConfigError(f"unknown verb {args.verb!r}")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = resolve_config(args)
        return dispatch(args, config)
    except ConfigError as err:
        _LOGGER.error("Configuration error: %s", err)
        return EXIT_CONFIG_ERROR
    except RefusionError as err:
        _LOGGER.error("%s failed: %s", args.verb, err)
        return EXIT_PARTIAL_FAILURE


if __name__ == "__main__":
    sys.exit(main())
