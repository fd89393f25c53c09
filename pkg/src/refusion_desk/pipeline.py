"""Experiment orchestration: per-seed runs, aggregation, sweeps and reports."""
from __future__ import annotations

import asyncio
from collections.abc import Callable, Sequence
import csv
from dataclasses import asdict, dataclass, field
import json
import logging
from pathlib import Path
import re
from typing import Any

import numpy as np

from .analyzer import (
    InferencePipeline,
    LatencyBreakdown,
    flops_rows,
    measure_latency,
    plot_data,
    write_flops_csv,
    write_json,
)
from .autodiff import RngStream
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, sweep_override
from .const import (
    ARCH_FILE,
    CHECKPOINT_FILE,
    CONFIG_ECHO_FILE,
    EVAL_FILE,
    FLOPS_CSV_FILE,
    FLOPS_PLOT_FILE,
    LATENCY_FILE,
    METRICS_LOG_FILE,
    RESULTS_CSV_FILE,
    RESULTS_JSON_FILE,
    SEED_DIR_TEMPLATE,
    STORE_FILE,
    SWEEP_CSV_FILE,
    TASK_FILE,
)
from .exceptions import ConfigError, RefusionError
from .integrator import export_architecture
from .model import AugmentationMode, EncoderModel, Example
from .retriever import QueryMode, Retriever, StoreStats, VectorStore, load_store, save_store
from .task import (
    SyntheticTask,
    build_task_store,
    check_purity,
    generate_task,
    make_retriever,
    prompt_only_ceiling,
    retrieval_vote_accuracy,
    write_task,
)
from .trainer import BilevelTrainer, EvalMetrics, SplitData

_LOGGER = logging.getLogger(__name__)

TRAINER_STREAM_KEY = 7


@dataclass
class SeedWorkspace:
    """Everything one seed's run is built from."""

    seed: int
    directory: Path
    task: SyntheticTask
    splits: SplitData
    store: VectorStore
    retriever: Retriever | None
    purity: float


@dataclass
class SeedOutcome:
    """Result record for one seed; failed seeds carry the reason."""

    seed: int
    status: str
    accuracy: float | None = None
    loss: float | None = None
    per_class_correct: list[int] = field(default_factory=list)
    per_class_total: list[int] = field(default_factory=list)
    architecture: dict[str, str] | None = None
    bayes_accuracy: float | None = None
    purity: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @classmethod
    def failed(cls, seed: int, err: BaseException) -> SeedOutcome:
        return cls(seed=seed, status="failed", error=f"{type(err).__name__}: {err}")

    def with_metrics(self, metrics: EvalMetrics) -> SeedOutcome:
        self.accuracy = metrics.accuracy
        self.loss = metrics.loss
        self.per_class_correct = list(metrics.per_class_correct)
        self.per_class_total = list(metrics.per_class_total)
        return self


@dataclass
class PipelineResult:
    """Aggregate over seeds; mean and std use successful seeds only."""

    variant: str
    outcomes: list[SeedOutcome]

    @property
    def successful(self) -> list[SeedOutcome]:
        return [outcome for outcome in self.outcomes if outcome.ok]

    @property
    def partial_failure(self) -> bool:
        return len(self.successful) != len(self.outcomes)

    @property
    def mean(self) -> float | None:
        accuracies = [o.accuracy for o in self.successful if o.accuracy is not None]
        return float(np.mean(accuracies)) if accuracies else None

    @property
    def std(self) -> float | None:
        accuracies = [o.accuracy for o in self.successful if o.accuracy is not None]
        return float(np.std(accuracies)) if accuracies else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "variant": self.variant,
            "mean_accuracy": self.mean,
            "std_accuracy": self.std,
            "successful_seeds": len(self.successful),
            "total_seeds": len(self.outcomes),
            "seeds": [asdict(outcome) for outcome in self.outcomes],
        }


RESULTS_CSV_COLUMNS = (
    "variant", "seed", "status", "accuracy", "loss", "bayes_accuracy", "purity", "architecture", "error"
)


def seed_directory(config: ExperimentConfig, seed: int) -> Path:
    return config.output_dir / SEED_DIR_TEMPLATE.format(seed=seed)


def prepare_seed(config: ExperimentConfig, seed: int, write: bool = True) -> SeedWorkspace:
    """Generate the task, build the store and the retriever for ``seed``."""
    directory = seed_directory(config, seed)
    task, splits = generate_task(config.data, config.model.vocab_size, config.model.hidden, seed)
    store = build_task_store(task, splits)
    purity = check_purity(task, store, config.retrieval.metric)
    retriever = None
    if config.model.augmentation is not AugmentationMode.NONE:
        retrieval = config.retrieval
        retriever = make_retriever(
            task, splits, store, retrieval.k, retrieval.metric, retrieval.query_mode, retrieval.exclude_self
        )
    if write:
        directory.mkdir(parents=True, exist_ok=True)
        write_task(task, splits, directory / TASK_FILE)
        save_store(store, directory / STORE_FILE)
    return SeedWorkspace(seed, directory, task, splits, store, retriever, purity)


def _base_outcome(workspace: SeedWorkspace) -> SeedOutcome:
    return SeedOutcome(
        seed=workspace.seed,
        status="ok",
        bayes_accuracy=workspace.task.bayes_accuracy(),
        purity=workspace.purity,
    )


def _architecture_text(model: EncoderModel) -> dict[str, str] | None:
    architecture = model.architecture()
    if not architecture:
        return None
    return {str(site): scheme.value for site, scheme in architecture.items()}


def run_seed(config: ExperimentConfig, seed: int) -> SeedOutcome:
    """generate -> store -> (search ->) train -> eval for one seed."""
    workspace = prepare_seed(config, seed)
    model = EncoderModel(config.model, seed)
    trainer = BilevelTrainer(model, workspace.retriever, config.train, RngStream(seed).split(TRAINER_STREAM_KEY))
    if model.config.searched:
        search = trainer.search(workspace.splits)
        metrics = trainer.finetune_discretized(
            workspace.splits, search.choices, config.train.steps - config.train.search_steps
        )
    else:
        trainer.train_plain(workspace.splits, config.train.steps)
        metrics = trainer.evaluate(workspace.splits.test)
    architecture = model.architecture()
    if architecture:
        (workspace.directory / ARCH_FILE).write_text(export_architecture(architecture), encoding="utf-8")
    trainer.write_log(workspace.directory / METRICS_LOG_FILE)
    save_checkpoint(model, workspace.directory / CHECKPOINT_FILE, seed)
    write_json(metrics.to_dict(), workspace.directory / EVAL_FILE)
    outcome = _base_outcome(workspace).with_metrics(metrics)
    outcome.architecture = _architecture_text(model)
    _LOGGER.info("Seed %d (%s) finished: accuracy %.4f", seed, config.variant, metrics.accuracy)
    return outcome


def search_seed(config: ExperimentConfig, seed: int) -> SeedOutcome:
    """Search only: writes the searched checkpoint and the discretized choice."""
    if not config.model.searched:
        raise ConfigError(f"variant {config.variant!r} has nothing to search")
    workspace = prepare_seed(config, seed)
    model = EncoderModel(config.model, seed)
    trainer = BilevelTrainer(model, workspace.retriever, config.train, RngStream(seed).split(TRAINER_STREAM_KEY))
    search = trainer.search(workspace.splits)
    trainer.write_log(workspace.directory / METRICS_LOG_FILE)
    save_checkpoint(model, workspace.directory / CHECKPOINT_FILE, seed)
    chosen = {site: config.model.candidates[index] for site, index in search.choices.items()}
    (workspace.directory / ARCH_FILE).write_text(export_architecture(chosen), encoding="utf-8")
    outcome = _base_outcome(workspace)
    outcome.architecture = {str(site): scheme.value for site, scheme in chosen.items()}
    return outcome


def eval_seed(config: ExperimentConfig, seed: int, latency_samples: int = 0) -> SeedOutcome:
    """Evaluate a saved checkpoint on the regenerated test split.

    With ``latency_samples`` > 0 the per-phase inference latency is measured
    too and written next to the evaluation.
    """
    directory = seed_directory(config, seed)
    checkpoint = directory / CHECKPOINT_FILE
    if not checkpoint.is_file():
        raise ConfigError(f"no checkpoint at {checkpoint}")
    workspace = prepare_seed(config, seed, write=False)
    if (directory / STORE_FILE).is_file() and workspace.retriever is not None:
        retrieval = config.retrieval
        workspace.retriever = make_retriever(
            workspace.task,
            workspace.splits,
            load_store(directory / STORE_FILE),
            retrieval.k,
            retrieval.metric,
            retrieval.query_mode,
            retrieval.exclude_self,
        )
    model = load_checkpoint(checkpoint)
    trainer = BilevelTrainer(model, workspace.retriever, config.train, RngStream(seed))
    metrics = trainer.evaluate(workspace.splits.test)
    write_json(metrics.to_dict(), directory / EVAL_FILE)
    if latency_samples > 0:
        breakdowns = measure_model_latency(model, workspace.retriever, workspace.splits.test, latency_samples)
        write_json([breakdown.to_dict() for breakdown in breakdowns], directory / LATENCY_FILE)
    outcome = _base_outcome(workspace).with_metrics(metrics)
    outcome.architecture = _architecture_text(model)
    return outcome


def measure_model_latency(
    model: EncoderModel,
    retriever: Retriever | None,
    examples: Sequence[Example],
    samples: int,
) -> list[LatencyBreakdown]:
    """Latency of the model's own augmentation mode; fusion is timed in both query modes."""
    pipeline = InferencePipeline(model, retriever, examples)
    mode = model.config.augmentation
    query_modes = tuple(QueryMode) if mode is AugmentationMode.FUSION else (QueryMode.INPUT_TEXT,)
    return [measure_latency(pipeline, mode, query_mode, samples) for query_mode in query_modes]


def gen_task_seed(config: ExperimentConfig, seed: int) -> SeedOutcome:
    directory = seed_directory(config, seed)
    directory.mkdir(parents=True, exist_ok=True)
    task, splits = generate_task(config.data, config.model.vocab_size, config.model.hidden, seed)
    write_task(task, splits, directory / TASK_FILE)
    return SeedOutcome(seed=seed, status="ok", bayes_accuracy=task.bayes_accuracy())


def build_store_seed(config: ExperimentConfig, seed: int) -> SeedOutcome:
    workspace = prepare_seed(config, seed)
    stats = StoreStats.of(workspace.store)
    _LOGGER.info("Seed %d store: %d entries of dim %d, labels %s", seed, stats.count, stats.dim, stats.labels)
    task, splits, retrieval = workspace.task, workspace.splits, config.retrieval
    _LOGGER.info(
        "Seed %d difficulty: prompt-only ceiling %.3f, retrieval vote %.3f",
        seed,
        prompt_only_ceiling(task, splits),
        retrieval_vote_accuracy(task, splits, workspace.store, retrieval.k, retrieval.metric),
    )
    return _base_outcome(workspace)


SeedStage = Callable[[ExperimentConfig, int], SeedOutcome]


def _guarded(stage: SeedStage, config: ExperimentConfig, seed: int) -> SeedOutcome:
    try:
        return stage(config, seed)
    except RefusionError as err:
        _LOGGER.error("Seed %d failed: %s", seed, err)
        return SeedOutcome.failed(seed, err)
    except Exception as err:  # noqa: BLE001
        _LOGGER.exception("Seed %d failed unexpectedly", seed)
        return SeedOutcome.failed(seed, err)


async def async_run_stage(config: ExperimentConfig, stage: SeedStage) -> PipelineResult:
    """Run ``stage`` for every seed on worker threads, at most ``workers`` at once."""
    config.output_dir.mkdir(parents=True, exist_ok=True)
    config.save(config.output_dir / CONFIG_ECHO_FILE)
    semaphore = asyncio.Semaphore(config.experiment.workers)

    async def one(seed: int) -> SeedOutcome:
        async with semaphore:
            return await asyncio.to_thread(_guarded, stage, config, seed)

    outcomes = await asyncio.gather(*(one(seed) for seed in config.experiment.seeds))
    return PipelineResult(config.variant, list(outcomes))


def run_stage(config: ExperimentConfig, stage: SeedStage) -> PipelineResult:
    return asyncio.run(async_run_stage(config, stage))


async def async_run_pipeline(config: ExperimentConfig) -> PipelineResult:
    result = await async_run_stage(config, run_seed)
    write_results(result, config.output_dir)
    _LOGGER.info(
        "Pipeline %s: %d/%d seeds succeeded, mean accuracy %s",
        config.variant,
        len(result.successful),
        len(result.outcomes),
        result.mean,
    )
    return result


def run_pipeline(config: ExperimentConfig) -> PipelineResult:
    """Full train/eval pipeline over every seed, writing JSON and CSV results."""
    return asyncio.run(async_run_pipeline(config))


def write_results(result: PipelineResult, directory: Path) -> None:
    write_json(result.to_dict(), directory / RESULTS_JSON_FILE)
    with (directory / RESULTS_CSV_FILE).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=RESULTS_CSV_COLUMNS)
        writer.writeheader()
        for outcome in result.outcomes:
            writer.writerow(
                {
                    "variant": result.variant,
                    "seed": outcome.seed,
                    "status": outcome.status,
                    "accuracy": "" if outcome.accuracy is None else repr(outcome.accuracy),
                    "loss": "" if outcome.loss is None else repr(outcome.loss),
                    "bayes_accuracy": "" if outcome.bayes_accuracy is None else repr(outcome.bayes_accuracy),
                    "purity": "" if outcome.purity is None else repr(outcome.purity),
                    "architecture": ";".join(f"{k}={v}" for k, v in (outcome.architecture or {}).items()),
                    "error": outcome.error or "",
                }
            )
        writer.writerow(
            {
                "variant": result.variant,
                "seed": "mean",
                "status": f"{len(result.successful)}/{len(result.outcomes)}",
                "accuracy": "" if result.mean is None else repr(result.mean),
                "loss": "" if result.std is None else f"std={result.std!r}",
            }
        )


def verify_output_manifest(config: ExperimentConfig) -> list[str]:
    """Paths a finished run should have produced but did not."""
    expected = [config.output_dir / name for name in (CONFIG_ECHO_FILE, RESULTS_JSON_FILE, RESULTS_CSV_FILE)]
    for seed in config.experiment.seeds:
        directory = seed_directory(config, seed)
        expected.extend(directory / name for name in (METRICS_LOG_FILE, CHECKPOINT_FILE, STORE_FILE, TASK_FILE))
        if config.model.fusion_sites:
            expected.append(directory / ARCH_FILE)
    return [str(path) for path in expected if not path.exists()]


# ---------------------------------------------------------------------------
# Sweeps and FLOPs report

SWEEP_CSV_COLUMNS = ("axis", "value", "variant", "mode", "seed", "status", "accuracy", "std")


@dataclass
class SweepResult:
    axis: str
    rows: list[dict[str, Any]]
    results: dict[tuple[str, str], PipelineResult]

    @property
    def partial_failure(self) -> bool:
        return any(result.partial_failure for result in self.results.values())


def _slug(value: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", value)


def sweep(
    config: ExperimentConfig, axis: str, values: Sequence[str], variants: Sequence[str] = ()
) -> SweepResult:
    """One pipeline run per value over the shared seeds.

    With ``variants`` every value runs once per listed variant, each in a
    directory prefixed with the variant name, and results are keyed by
    ``(variant, value)``.
    """
    if variants and axis == "variant":
        raise ConfigError("a variant sweep cannot also be split by variant")
    rows: list[dict[str, Any]] = []
    results: dict[tuple[str, str], PipelineResult] = {}
    for variant in variants or (config.variant,):
        for value in values:
            key, text = sweep_override(axis, value)
            directory = f"{axis}-{_slug(value)}"
            if variants:
                directory = f"{variant}-{directory}"
            cell = config.with_overrides(
                {
                    "experiment.variant": variant,
                    key: text,
                    "experiment.output_dir": str(config.output_dir / directory),
                }
            )
            result = run_pipeline(cell)
            results[(cell.variant, value)] = result
            tag = {"axis": axis, "value": value, "variant": cell.variant, "mode": cell.model.augmentation.value}
            for outcome in result.outcomes:
                rows.append(
                    {
                        **tag,
                        "seed": outcome.seed,
                        "status": outcome.status,
                        "accuracy": "" if outcome.accuracy is None else repr(outcome.accuracy),
                        "std": "",
                    }
                )
            rows.append(
                {
                    **tag,
                    "seed": "mean",
                    "status": f"{len(result.successful)}/{len(result.outcomes)}",
                    "accuracy": "" if result.mean is None else repr(result.mean),
                    "std": "" if result.std is None else repr(result.std),
                }
            )
    config.output_dir.mkdir(parents=True, exist_ok=True)
    with (config.output_dir / SWEEP_CSV_FILE).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=SWEEP_CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return SweepResult(axis, rows, results)


def _sweep_accuracy(config: ExperimentConfig) -> dict[tuple[str, int], float]:
    """Mean accuracies of an earlier k sweep in the same output directory, keyed by (mode, k).

    The first variant listed for a mode wins.
    """
    path = config.output_dir / SWEEP_CSV_FILE
    if not path.is_file():
        return {}
    accuracy: dict[tuple[str, int], float] = {}
    with path.open(newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            mode = row.get("mode") or ""
            if row["axis"] != "k" or row["seed"] != "mean" or not row["accuracy"]:
                continue
            if mode in ("", AugmentationMode.NONE.value):
                continue
            accuracy.setdefault((mode, int(row["value"])), float(row["accuracy"]))
    return accuracy


def flops_report_command(config: ExperimentConfig, k_values: Sequence[int] | None = None) -> list[dict[str, Any]]:
    """Concat vs fusion FLOPs per k, written as CSV plus plot data."""
    k_values = tuple(config.sweep.flops_k if k_values is None else k_values)
    model_config = config.model
    layers = model_config.num_layers if model_config.fusion_layers is None else len(model_config.fusion_layers)
    active_sites = layers * len(model_config.fusion_roles)
    rows = flops_rows(
        model_config,
        k_values,
        prompt_len=config.data.prompt_len,
        retrieval_len=config.data.body_len,
        num_active_sites=active_sites,
        accuracy=_sweep_accuracy(config),
    )
    config.output_dir.mkdir(parents=True, exist_ok=True)
    write_flops_csv(rows, config.output_dir / FLOPS_CSV_FILE)
    write_json(plot_data(rows), config.output_dir / FLOPS_PLOT_FILE)
    _LOGGER.info("Wrote FLOPs report for k in %s", list(k_values))
    return rows


def load_results(directory: str | Path) -> dict[str, Any]:
    return json.loads((Path(directory) / RESULTS_JSON_FILE).read_text(encoding="utf-8"))
