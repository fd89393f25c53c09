"""Analytic FLOPs accounting and latency breakdowns for concatenation vs fusion."""
from __future__ import annotations

from collections.abc import Sequence
import csv
from dataclasses import asdict, dataclass, fields
import json
import logging
from pathlib import Path
import statistics
import threading
import time
from typing import Any

import numpy as np

from .autodiff import count_flops
from .const import (
    CLS_TOKEN_ID,
    FLOPS_PER_MULTIPLY_ADD,
    GELU_FLOPS_PER_ELEMENT,
    LATENCY_MIN_SAMPLES,
    LATENCY_WARMUP_RUNS,
    LAYER_NORM_FLOPS_PER_ELEMENT,
    MASK_TOKEN_ID,
    ORDERED_MASK_FLOPS_PER_UNIT,
    RERANKER_SOFTMAX_FLOPS_PER_RETRIEVAL,
    SOFTMAX_FLOPS_PER_ELEMENT,
)
from .exceptions import ParameterError, RefusionError
from .fusion import FusionScheme
from .model import AugmentationMode, EncoderModel, Example, ModelConfig
from .retriever import QueryMode, Retriever

_LOGGER = logging.getLogger(__name__)

_LATENCY_LOCK = threading.Lock()
LATENCY_SLACK_MS = 0.05

FLOP_COST_TABLE = {
    "multiply_add": FLOPS_PER_MULTIPLY_ADD,
    "layer_norm_per_element": LAYER_NORM_FLOPS_PER_ELEMENT,
    "softmax_per_element": SOFTMAX_FLOPS_PER_ELEMENT,
    "gelu_per_element": GELU_FLOPS_PER_ELEMENT,
    "reranker_softmax_per_retrieval": RERANKER_SOFTMAX_FLOPS_PER_RETRIEVAL,
    "ordered_mask_per_unit": ORDERED_MASK_FLOPS_PER_UNIT,
}


@dataclass(frozen=True)
class FlopsReport:
    """Per-component FLOPs of one forward pass over ``seq_len`` tokens."""

    seq_len: int
    embedding: int
    attention_scores: int
    attention_projections: int
    ffn: int
    elementwise: int
    nonlinear: int
    fusion_overhead: int
    classifier: int
    k: int = 0
    clamped: bool = False

    COMPONENTS = (
        "embedding",
        "attention_scores",
        "attention_projections",
        "ffn",
        "elementwise",
        "nonlinear",
        "fusion_overhead",
        "classifier",
    )

    @property
    def total(self) -> int:
        return sum(getattr(self, name) for name in self.COMPONENTS)

    def components(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in self.COMPONENTS}

    def to_dict(self) -> dict[str, Any]:
        return {**asdict(self), "total": self.total, "cost_table": FLOP_COST_TABLE}


def flops_encoder(config: ModelConfig, seq_len: int) -> FlopsReport:
    """Analytic FLOPs of the plain encoder; mirrors every operation of the forward pass."""
    if not 1 <= seq_len <= config.max_len:
        raise ParameterError(f"seq_len {seq_len} outside [1, {config.max_len}]")
    n, d, f, h = config.num_layers, config.hidden, config.ffn_hidden, config.heads
    length = seq_len
    mac = FLOPS_PER_MULTIPLY_ADD
    per_layer_elementwise = 4 * length * d + length * f + length * d + 2 * length * d
    per_layer_nonlinear = (
        2 * LAYER_NORM_FLOPS_PER_ELEMENT * length * d
        + h * length * length
        + SOFTMAX_FLOPS_PER_ELEMENT * h * length * length
        + GELU_FLOPS_PER_ELEMENT * length * f
    )
    return FlopsReport(
        seq_len=seq_len,
        embedding=length * d,
        attention_scores=n * 2 * (mac * length * length * d),
        attention_projections=n * 4 * (mac * length * d * d),
        ffn=n * 2 * (mac * length * d * f),
        elementwise=n * per_layer_elementwise,
        nonlinear=n * per_layer_nonlinear + LAYER_NORM_FLOPS_PER_ELEMENT * length * d,
        fusion_overhead=0,
        classifier=mac * d * config.num_labels,
    )


def concat_length(prompt_len: int, k: int, retrieval_len: int) -> int:
    """Unclamped length of [cls] z1 [sep] ... zk [sep] prompt[1:]."""
    return prompt_len + k * (retrieval_len + 1)


def flops_rc(config: ModelConfig, prompt_len: int, k: int, retrieval_len: int) -> FlopsReport:
    """Encoder FLOPs at the concatenated length, clamped to max_len."""
    if prompt_len > config.max_len:
        raise ParameterError(f"prompt of {prompt_len} tokens exceeds max_len {config.max_len}")
    if k < 0 or retrieval_len < 0:
        raise ParameterError("k and retrieval_len must not be negative")
    wanted = concat_length(prompt_len, k, retrieval_len)
    report = flops_encoder(config, min(wanted, config.max_len))
    return _replace(report, k=k, clamped=wanted > config.max_len)


def fusion_overhead(config: ModelConfig, k: int, scheme: FusionScheme = FusionScheme.RERANKER) -> int:
    """Extra FLOPs of one active fusion site."""
    d, mac = config.hidden, FLOPS_PER_MULTIPLY_ADD
    if scheme is FusionScheme.RERANKER:
        return mac * k * d + RERANKER_SOFTMAX_FLOPS_PER_RETRIEVAL * k
    if scheme is FusionScheme.ORDERED_MASK:
        return mac * k * d + ORDERED_MASK_FLOPS_PER_UNIT * k * d
    return 0


def flops_rf(
    config: ModelConfig,
    prompt_len: int,
    k: int,
    num_active_sites: int,
    scheme: FusionScheme = FusionScheme.RERANKER,
) -> FlopsReport:
    """Encoder FLOPs at prompt_len plus per-site fusion overhead."""
    if k < 0 or num_active_sites < 0:
        raise ParameterError("k and num_active_sites must not be negative")
    report = flops_encoder(config, prompt_len)
    return _replace(report, k=k, fusion_overhead=num_active_sites * fusion_overhead(config, k, scheme))


def _replace(report: FlopsReport, **changes: Any) -> FlopsReport:
    values = {item.name: getattr(report, item.name) for item in fields(report)}
    values.update(changes)
    return FlopsReport(**values)


def count_encoder_flops(model: EncoderModel, seq_len: int) -> int:
    """FLOPs counted by instrumenting a real single-sequence forward pass."""
    if model.needs_hits:
        raise ParameterError("count_encoder_flops needs a model without active fusion sites")
    if not 2 <= seq_len <= model.config.max_len:
        raise ParameterError(f"seq_len {seq_len} outside [2, {model.config.max_len}]")
    tokens = [CLS_TOKEN_ID] * (seq_len - 1) + [MASK_TOKEN_ID]
    with count_flops() as counter:
        model.forward_batch([tokens])
    return counter.total


# ---------------------------------------------------------------------------
# Latency


@dataclass(frozen=True)
class LatencyBreakdown:
    """Median per-phase wall clock in milliseconds."""

    mode: str
    query_mode: str
    retrieve_ms: float
    forward_ms: float
    total_ms: float
    samples: int
    slack_ms: float = LATENCY_SLACK_MS

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class InferencePipeline:
    """Runs single-example inference with retrieval attributed to its own phase."""

    def __init__(self, model: EncoderModel, retriever: Retriever | None, examples: Sequence[Example]) -> None:
        """Initialize with a model, its retriever and the examples to cycle through."""
        if not examples:
            raise ParameterError("latency measurement needs at least one example")
        self.model = model
        self.retriever = retriever
        self.examples = list(examples)

    def run_once(self, example: Example, mode: AugmentationMode, query_mode: QueryMode) -> tuple[int, int, int]:
        """(retrieve_ns, forward_ns, total_ns) for one example."""
        started = time.perf_counter_ns()
        if mode is AugmentationMode.NONE or self.retriever is None:
            self.model.forward_batch([example.tokens])
            total = time.perf_counter_ns() - started
            return 0, total, total
        if mode is AugmentationMode.CONCAT:
            documents = self.retriever.neighbor_documents(example)
            retrieved = time.perf_counter_ns()
            self.model.forward_concat(example, documents)
            finished = time.perf_counter_ns()
            return retrieved - started, finished - retrieved, finished - started
        context = self.retriever.context([example], query_mode)
        self.model.forward_batch([example.tokens], context)
        total = time.perf_counter_ns() - started
        retrieve = int(context.retrieve_seconds * 1e9)
        return retrieve, total - retrieve, total


def measure_latency(
    pipeline: InferencePipeline,
    mode: AugmentationMode,
    query_mode: QueryMode = QueryMode.INPUT_TEXT,
    samples: int = LATENCY_MIN_SAMPLES,
    warmup: int = LATENCY_WARMUP_RUNS,
) -> LatencyBreakdown:
    """Median retrieve/forward/total times after ``warmup`` discarded runs.

    Only one measurement may run per process at a time.
    """
    if samples < 1:
        raise ParameterError("samples must be positive")
    if samples < LATENCY_MIN_SAMPLES:
        _LOGGER.warning("Latency medians over %d samples; %d or more recommended", samples, LATENCY_MIN_SAMPLES)
    if not _LATENCY_LOCK.acquire(blocking=False):
        raise RefusionError("a latency measurement is already running in this process")
    try:
        retrieve, forward, total = [], [], []
        for run in range(warmup + samples):
            example = pipeline.examples[run % len(pipeline.examples)]
            r, f, t = pipeline.run_once(example, mode, query_mode)
            if run >= warmup:
                retrieve.append(r)
                forward.append(f)
                total.append(t)
    finally:
        _LATENCY_LOCK.release()
    breakdown = LatencyBreakdown(
        mode=mode.value,
        query_mode=query_mode.value,
        retrieve_ms=statistics.median(retrieve) / 1e6,
        forward_ms=statistics.median(forward) / 1e6,
        total_ms=statistics.median(total) / 1e6,
        samples=len(total),
    )
    _LOGGER.info("Latency %s/%s: %s", mode, query_mode, breakdown)
    return breakdown


# ---------------------------------------------------------------------------
# Report emitters

FLOPS_CSV_COLUMNS = (
    "k",
    "rc_flops",
    "rf_flops",
    "rc_seq_len",
    "rf_seq_len",
    "rc_clamped",
    "rf_fusion_flops",
    "rc_accuracy",
    "rf_accuracy",
)


def flops_rows(
    config: ModelConfig,
    k_values: Sequence[int],
    prompt_len: int,
    retrieval_len: int,
    num_active_sites: int,
    accuracy: dict[tuple[str, int], float] | None = None,
) -> list[dict[str, Any]]:
    """One row per k comparing concatenation (rc) with fusion (rf).

    ``accuracy`` maps ("Concat" | "Fusion", k) to a mean accuracy when a
    k sweep has been run.
    """
    accuracy = accuracy or {}
    rows = []
    for k in k_values:
        rc = flops_rc(config, prompt_len, k, retrieval_len)
        rf = flops_rf(config, prompt_len, k, num_active_sites)
        rows.append(
            {
                "k": k,
                "rc_flops": rc.total,
                "rf_flops": rf.total,
                "rc_seq_len": rc.seq_len,
                "rf_seq_len": rf.seq_len,
                "rc_clamped": rc.clamped,
                "rf_fusion_flops": rf.fusion_overhead,
                "rc_accuracy": accuracy.get((AugmentationMode.CONCAT.value, k), ""),
                "rf_accuracy": accuracy.get((AugmentationMode.FUSION.value, k), ""),
            }
        )
    return rows


def write_flops_csv(rows: Sequence[dict[str, Any]], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=FLOPS_CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def _or_none(value: Any) -> Any:
    return None if value == "" else value


def plot_data(rows: Sequence[dict[str, Any]]) -> dict[str, Any]:
    """FLOPs-vs-k curves for both modes, plus the growth ratio max(k)/k=1."""
    ks = [row["k"] for row in rows]
    curves = {
        prefix: {
            "k": ks,
            "flops_total": [row[f"{prefix}_flops"] for row in rows],
            "seq_len": [row[f"{prefix}_seq_len"] for row in rows],
            "accuracy": [_or_none(row.get(f"{prefix}_accuracy", "")) for row in rows],
        }
        for prefix in ("rc", "rf")
    }
    ratios = {}
    if 1 in ks and max(ks) > 1:
        first, last = ks.index(1), ks.index(max(ks))
        for prefix, curve in curves.items():
            ratios[prefix] = curve["flops_total"][last] / curve["flops_total"][first]
    return {"curves": curves, "ratio_max_k_over_k1": ratios, "cost_table": FLOP_COST_TABLE}


def write_json(data: Any, path: str | Path) -> None:
    Path(path).write_text(json.dumps(data, sort_keys=True, indent=2, default=_json_default), encoding="utf-8")


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")
