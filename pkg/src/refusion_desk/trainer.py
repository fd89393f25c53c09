"""Alternating bi-level optimization of encoder weights and architecture logits."""
from __future__ import annotations

from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import asdict, dataclass, field
import hashlib
import json
import logging
import math
from pathlib import Path
import time
from typing import Any

import numpy as np

from .autodiff import Parameter, RngStream, Tape, backward
from .const import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_EVAL_INTERVAL,
    DEFAULT_LR_ARCH,
    DEFAULT_LR_WEIGHTS,
    DEFAULT_SEARCH_FRACTION,
    DEFAULT_STEPS,
    DEFAULT_TAU_END,
    DEFAULT_TAU_START,
    DEFAULT_WEIGHT_DECAY,
)
from .exceptions import ConfigError, TrainingError
from .integrator import FusionSite, discretize
from .model import EncoderModel, Example
from .retriever import Retriever

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings shared by both levels."""

    lr_weights: float = DEFAULT_LR_WEIGHTS
    lr_arch: float = DEFAULT_LR_ARCH
    batch_size: int = DEFAULT_BATCH_SIZE
    steps: int = DEFAULT_STEPS
    search_fraction: float = DEFAULT_SEARCH_FRACTION
    tau_start: float = DEFAULT_TAU_START
    tau_end: float = DEFAULT_TAU_END
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    arch_weight_decay: float = 0.0
    eval_interval: int = DEFAULT_EVAL_INTERVAL
    record_wall_time: bool = False

    def __post_init__(self) -> None:
        if self.lr_weights < 0 or self.lr_arch < 0:
            raise ConfigError("learning rates must not be negative")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.search_fraction <= 1.0:
            raise ConfigError(f"search_fraction must lie in [0, 1], got {self.search_fraction}")
        if not (self.tau_start > 0 and self.tau_end > 0):
            raise ConfigError("temperatures must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.eps > 0):
            raise ConfigError("invalid moment settings")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be positive")

    @property
    def search_steps(self) -> int:
        return int(round(self.steps * self.search_fraction))

    def tau_at(self, step: int) -> float:
        """Linear anneal from tau_start to tau_end over the whole run."""
        if self.steps <= 1:
            return self.tau_start
        fraction = min(max(step / (self.steps - 1), 0.0), 1.0)
        return self.tau_start + (self.tau_end - self.tau_start) * fraction


@dataclass(frozen=True)
class SplitData:
    """Few-shot splits; the retrieval pool is built from the training side only."""

    train: tuple[Example, ...]
    val: tuple[Example, ...]
    test: tuple[Example, ...]
    pool: tuple[Example, ...]
    shots: int

    def __post_init__(self) -> None:
        train_ids = {ex.id for ex in self.train}
        val_ids = {ex.id for ex in self.val}
        test_ids = {ex.id for ex in self.test}
        if train_ids & val_ids or train_ids & test_ids or val_ids & test_ids:
            raise ConfigError("train, validation and test splits must be disjoint")
        if {ex.id for ex in self.pool} & (val_ids | test_ids):
            raise ConfigError("the retrieval pool may only hold training-side examples")


@dataclass
class AdamW:
    """Adaptive moments with decoupled weight decay."""

    parameters: list[Parameter]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def step(self, gradients: Mapping[str, np.ndarray]) -> None:
        """p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p), in place."""
        self.step_count += 1
        t = self.step_count
        for parameter in self.parameters:
            grad = gradients[parameter.name]
            m, v = self.moments.get(parameter.name, (np.zeros_like(grad), np.zeros_like(grad)))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.moments[parameter.name] = (m, v)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            if self.lr == 0.0:
                continue
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * parameter.value
            parameter.value -= self.lr * update

    def retain(self, parameters: Iterable[Parameter]) -> None:
        """Restrict to ``parameters``, keeping moment state for survivors."""
        self.parameters = list(parameters)
        names = {parameter.name for parameter in self.parameters}
        self.moments = {name: state for name, state in self.moments.items() if name in names}


def parameter_digest(parameters: Iterable[Parameter]) -> str:
    """sha256 over parameter names and raw buffers."""
    sha = hashlib.sha256()
    for parameter in parameters:
        sha.update(parameter.name.encode())
        sha.update(np.ascontiguousarray(parameter.value).tobytes())
    return sha.hexdigest()


@dataclass
class StepRecord:
    """One metrics log line."""

    step: int
    phase: str
    train_loss: float
    val_loss: float | None
    tau: float
    alpha: dict[str, list[float]]
    alpha_digest: str
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class EvalMetrics:
    """Accuracy plus per-class tallies."""

    accuracy: float
    loss: float
    per_class_correct: tuple[int, ...]
    per_class_total: tuple[int, ...]

    @property
    def size(self) -> int:
        return sum(self.per_class_total)

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "loss": self.loss,
            "per_class_correct": list(self.per_class_correct),
            "per_class_total": list(self.per_class_total),
        }


@dataclass
class SearchResult:
    """Outcome of the bi-level search phase."""

    choices: dict[FusionSite, int]
    alpha: dict[str, list[float]]
    log: list[StepRecord]


class _Batches:
    """Endless epoch-shuffled batches drawn from a fixed example list."""

    def __init__(self, examples: Sequence[Example], batch_size: int, rng: RngStream) -> None:
        """Initialize the sampler."""
        if not examples:
            raise ConfigError("cannot sample batches from an empty split")
        self.examples = list(examples)
        self.batch_size = min(batch_size, len(self.examples))
        self.rng = rng
        self._order: list[int] = []

    def __iter__(self) -> Iterator[list[Example]]:
        return self

    def __next__(self) -> list[Example]:
        if len(self._order) < self.batch_size:
            self._order.extend(int(i) for i in self.rng.permutation(len(self.examples)))
        chosen, self._order = self._order[: self.batch_size], self._order[self.batch_size :]
        return [self.examples[i] for i in chosen]


class BilevelTrainer:
    """Owns both optimizers, the tau schedule and the metrics log for one run."""

    def __init__(
        self,
        model: EncoderModel,
        retriever: Retriever | None,
        config: TrainConfig,
        rng: RngStream,
    ) -> None:
        """Initialize the optimizers over the model's current parameters."""
        self.model = model
        self.retriever = retriever
        self.config = config
        self.weight_optimizer = AdamW(
            model.weight_parameters(), config.lr_weights, config.beta1, config.beta2, config.eps, config.weight_decay
        )
        self.arch_optimizer = AdamW(
            model.arch_parameters(), config.lr_arch, config.beta1, config.beta2, config.eps, config.arch_weight_decay
        )
        self._train_rng = rng.split(1)
        self._val_rng = rng.split(2)
        self._noise_rng = rng.split(3)
        self.log: list[StepRecord] = []
        self.global_step = 0

    # -- single steps -----------------------------------------------------

    def _loss_and_gradients(self, batch: Sequence[Example], parameters: list[Parameter]) -> tuple[float, dict]:
        tape = Tape()
        loss = self.model.loss(batch, self.retriever, tape, self._noise_rng, noise_free=False)
        value = loss.item()
        if not math.isfinite(value):
            diagnostics = {
                "loss": value,
                "tau": self.config.tau_at(self.global_step),
                "batch_ids": [ex.id for ex in batch],
            }
            _LOGGER.error("Non-finite loss at step %d: %s", self.global_step, diagnostics)
            raise TrainingError("non-finite loss", self.global_step, diagnostics)
        return value, backward(tape, loss).for_parameters(parameters)

    def lower_step(self, batch: Sequence[Example]) -> float:
        """One weight update on a training batch; architecture logits untouched."""
        value, grads = self._loss_and_gradients(batch, self.weight_optimizer.parameters)
        self.weight_optimizer.step(grads)
        return value

    def upper_step(self, batch: Sequence[Example]) -> float:
        """One architecture-logit update on a validation batch; weights untouched.

        First-order: the current weights are treated as constants.
        """
        if not self.arch_optimizer.parameters:
            raise TrainingError("model has no architecture parameters to search", self.global_step)
        value, grads = self._loss_and_gradients(batch, self.arch_optimizer.parameters)
        self.arch_optimizer.step(grads)
        return value

    # -- phases -----------------------------------------------------------

    def _record(self, phase: str, train_loss: float, val_loss: float | None, tau: float, started: float) -> None:
        arch = self.model.arch
        wall_ms = (time.perf_counter() - started) * 1000.0 if self.config.record_wall_time else 0.0
        record = StepRecord(
            step=self.global_step,
            phase=phase,
            train_loss=train_loss,
            val_loss=val_loss,
            tau=tau,
            alpha=arch.snapshot() if arch is not None else {},
            alpha_digest=arch.digest() if arch is not None else "",
            wall_ms=wall_ms,
        )
        self.log.append(record)
        _LOGGER.debug("step %d %s train=%.5f val=%s tau=%.4f", record.step, phase, train_loss, val_loss, tau)

    def _set_tau(self) -> float:
        tau = self.config.tau_at(self.global_step)
        self.model.set_tau(tau)
        return tau

    def search(self, splits: SplitData, steps: int | None = None) -> SearchResult:
        """Alternate lower and upper steps, annealing tau, then discretize by argmax."""
        if self.model.arch is None:
            raise TrainingError("search needs a model with an architecture mixture", self.global_step)
        steps = self.config.search_steps if steps is None else steps
        train_batches = _Batches(splits.train, self.config.batch_size, self._train_rng)
        val_batches = _Batches(splits.val, self.config.batch_size, self._val_rng)
        for _ in range(steps):
            started = time.perf_counter()
            tau = self._set_tau()
            train_loss = self.lower_step(next(train_batches))
            val_loss = self.upper_step(next(val_batches))
            self._record("search", train_loss, val_loss, tau, started)
            self.global_step += 1
        choices = discretize(self.model.arch)
        _LOGGER.info("Search finished after %d steps: %s", steps, {str(s): c for s, c in choices.items()})
        return SearchResult(choices, self.model.arch.snapshot(), self.log[-steps:] if steps else [])

    def train_plain(self, splits: SplitData, steps: int | None = None, phase: str = "train") -> None:
        """Lower-level steps only, with periodic validation loss."""
        steps = self.config.steps - self.global_step if steps is None else steps
        train_batches = _Batches(splits.train, self.config.batch_size, self._train_rng)
        for offset in range(steps):
            started = time.perf_counter()
            tau = self._set_tau()
            train_loss = self.lower_step(next(train_batches))
            val_loss = None
            if (offset + 1) % self.config.eval_interval == 0 or offset == steps - 1:
                val_loss = self.evaluate(splits.val).loss
            self._record(phase, train_loss, val_loss, tau, started)
            self.global_step += 1

    def finetune_discretized(
        self,
        splits: SplitData,
        choices: Mapping[FusionSite, int],
        steps: int | None = None,
    ) -> EvalMetrics:
        """Swap mixtures for the chosen candidates, keep training, report test metrics."""
        self.model.discretize(choices)
        self.weight_optimizer.retain(self.model.weight_parameters())
        self.arch_optimizer.retain([])
        self.train_plain(splits, steps, phase="finetune")
        return self.evaluate(splits.test)

    def evaluate(self, examples: Sequence[Example]) -> EvalMetrics:
        """Noise-free accuracy and mean loss."""
        num_labels = self.model.config.num_labels
        logits = self.model.predict(examples, self.retriever)
        labels = np.array([ex.label for ex in examples], dtype=np.int64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = float(-log_probs[np.arange(len(labels)), labels].mean())
        correct = logits.argmax(axis=1) == labels
        per_class_total = np.bincount(labels, minlength=num_labels)
        per_class_correct = np.bincount(labels[correct], minlength=num_labels)
        return EvalMetrics(
            accuracy=float(correct.mean()),
            loss=loss,
            per_class_correct=tuple(int(c) for c in per_class_correct),
            per_class_total=tuple(int(c) for c in per_class_total),
        )

    def write_log(self, path: str | Path) -> None:
        """Write the metrics log as JSON lines."""
        Path(path).write_text("".join(record.to_json() + "\n" for record in self.log), encoding="utf-8")
