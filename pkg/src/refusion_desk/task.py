"""Synthetic few-shot classification task with a labelled retrieval pool."""
from __future__ import annotations

from dataclasses import asdict, dataclass
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import RngStream
from .const import (
    CLS_TOKEN_ID,
    DEFAULT_BODY_LEN,
    DEFAULT_CLUSTER_NOISE,
    DEFAULT_CLUSTER_SIZE,
    DEFAULT_ENCODER_NORM,
    DEFAULT_NOISE_RATE,
    DEFAULT_NOISE_TOKEN_SCALE,
    DEFAULT_NUM_CLASSES,
    DEFAULT_POOL_EXTRA_PER_CLASS,
    DEFAULT_PURITY,
    DEFAULT_SHOTS,
    DEFAULT_TEST_PER_CLASS,
    DEFAULT_VAL_SHOTS,
    DEFAULT_VOTE_K,
    FIRST_LABEL_TOKEN_ID,
    MASK_TOKEN_ID,
    SEP_TOKEN_ID,
)
from .exceptions import ConfigError
from .model import Example
from .retriever import (
    Metric,
    QueryMode,
    Retriever,
    StoreEntry,
    VectorStore,
    build_store,
    encode_query,
    top_k,
)
from .trainer import SplitData

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class DataConfig:
    """Generator settings for the synthetic task."""

    num_classes: int = DEFAULT_NUM_CLASSES
    shots: int = DEFAULT_SHOTS
    val_shots: int = DEFAULT_VAL_SHOTS
    test_per_class: int = DEFAULT_TEST_PER_CLASS
    pool_extra_per_class: int = DEFAULT_POOL_EXTRA_PER_CLASS
    body_len: int = DEFAULT_BODY_LEN
    cluster_size: int = DEFAULT_CLUSTER_SIZE
    noise_rate: float = DEFAULT_NOISE_RATE
    cluster_noise: float = DEFAULT_CLUSTER_NOISE
    noise_token_scale: float = DEFAULT_NOISE_TOKEN_SCALE
    encoder_norm: float = DEFAULT_ENCODER_NORM
    purity: float = DEFAULT_PURITY

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"at least two classes are required, got {self.num_classes}")
        if min(self.shots, self.val_shots, self.test_per_class, self.body_len, self.cluster_size) < 1:
            raise ConfigError("shot counts, body length and cluster size must be positive")
        if self.pool_extra_per_class < 0:
            raise ConfigError("pool_extra_per_class must not be negative")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError(f"noise_rate must lie in [0, 1), got {self.noise_rate}")
        if self.cluster_noise < 0 or self.noise_token_scale < 0:
            raise ConfigError("noise scales must not be negative")
        if not self.encoder_norm > 0:
            raise ConfigError(f"encoder_norm must be positive, got {self.encoder_norm}")
        if not 0.0 <= self.purity <= 1.0:
            raise ConfigError(f"purity target must lie in [0, 1], got {self.purity}")

    @property
    def prompt_len(self) -> int:
        """[cls] body [mask] [sep]."""
        return self.body_len + 3


@dataclass(frozen=True, eq=False)
class SyntheticTask:
    """Vocabulary layout and the fixed query-encoder table of one generated task."""

    config: DataConfig
    seed: int
    vocab_size: int
    cluster_tokens: tuple[tuple[int, ...], ...]
    noise_tokens: tuple[int, ...]
    prototypes: np.ndarray
    encoder_table: np.ndarray

    @property
    def label_token_ids(self) -> tuple[int, ...]:
        return tuple(range(FIRST_LABEL_TOKEN_ID, FIRST_LABEL_TOKEN_ID + self.config.num_classes))

    def bayes_accuracy(self) -> float:
        """1 - rho^n + rho^n / C: any cluster token reveals the class."""
        all_noise = self.config.noise_rate**self.config.body_len
        return 1.0 - all_noise + all_noise / self.config.num_classes

    def embed(self, body: tuple[int, ...]) -> np.ndarray:
        """Mean encoder-table vector of the body tokens."""
        return encode_query(body, QueryMode.INPUT_TEXT, self.encoder_table)


def prompt(body: tuple[int, ...]) -> tuple[int, ...]:
    """[cls] body [mask] [sep]."""
    return (CLS_TOKEN_ID, *body, MASK_TOKEN_ID, SEP_TOKEN_ID)


def generate_task(config: DataConfig, vocab_size: int, hidden: int, seed: int) -> tuple[SyntheticTask, SplitData]:
    """Deterministically generate the vocabulary, encoder table and all splits."""
    classes = config.num_classes
    first_cluster = FIRST_LABEL_TOKEN_ID + classes
    first_noise = first_cluster + classes * config.cluster_size
    if first_noise >= vocab_size:
        raise ConfigError(
            f"vocabulary of {vocab_size} is too small for {classes} clusters of {config.cluster_size} tokens"
        )
    rng = RngStream(seed)
    table_rng, sample_rng = rng.split(1), rng.split(2)

    cluster_tokens = tuple(
        tuple(range(first_cluster + c * config.cluster_size, first_cluster + (c + 1) * config.cluster_size))
        for c in range(classes)
    )
    noise_tokens = tuple(range(first_noise, vocab_size))

    prototypes = table_rng.normal((classes, hidden))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    table = table_rng.normal((vocab_size, hidden), config.noise_token_scale / np.sqrt(hidden))
    jitter = table_rng.normal((classes, config.cluster_size, hidden), config.cluster_noise / np.sqrt(hidden))
    for c, tokens in enumerate(cluster_tokens):
        table[list(tokens)] = prototypes[c] + jitter[c]
    table *= config.encoder_norm

    task = SyntheticTask(config, seed, vocab_size, cluster_tokens, noise_tokens, prototypes, table)

    next_id = 0

    def draw(per_class: int) -> tuple[Example, ...]:
        nonlocal next_id
        examples = []
        for label in range(classes):
            for _ in range(per_class):
                noisy = sample_rng.bernoulli(config.noise_rate, config.body_len)
                noise = sample_rng.integers(0, len(noise_tokens), config.body_len)
                cluster = sample_rng.integers(0, config.cluster_size, config.body_len)
                body = tuple(
                    noise_tokens[n] if is_noise else cluster_tokens[label][c]
                    for is_noise, n, c in zip(noisy, noise, cluster)
                )
                examples.append(Example(next_id, prompt(body), label))
                next_id += 1
        order = sample_rng.permutation(len(examples))
        return tuple(examples[i] for i in order)

    train = draw(config.shots)
    val = draw(config.val_shots)
    test = draw(config.test_per_class)
    extra = draw(config.pool_extra_per_class) if config.pool_extra_per_class else ()
    splits = SplitData(train=train, val=val, test=test, pool=train + extra, shots=config.shots)
    _LOGGER.info(
        "Generated task seed=%d: %d train, %d val, %d test, %d pool; Bayes accuracy %.4f",
        seed,
        len(train),
        len(val),
        len(test),
        len(splits.pool),
        task.bayes_accuracy(),
    )
    return task, splits


def build_task_store(task: SyntheticTask, splits: SplitData) -> VectorStore:
    """Embed every pool example; the payload is its label."""
    return build_store(StoreEntry(ex.id, task.embed(ex.body), ex.label) for ex in splits.pool)


def make_retriever(
    task: SyntheticTask,
    splits: SplitData,
    store: VectorStore,
    k: int,
    metric: Metric,
    query_mode: QueryMode,
    exclude_self: bool = True,
) -> Retriever:
    """Retriever over ``store`` with the task's encoder and pool documents."""
    documents = {ex.id: ex.body for ex in splits.pool}
    return Retriever(store, k, metric, query_mode, task.encoder_table, exclude_self, documents)


def neighbour_purity(store: VectorStore, metric: Metric = Metric.L2) -> float:
    """Fraction of entries whose nearest other entry carries the same label."""
    if len(store) < 2:
        return 1.0
    same = 0
    for row in range(len(store)):
        hit = top_k(store, store.vectors[row], 1, metric, exclude_id=int(store.ids[row]))[0]
        same += int(hit.payload == store.payloads[row])
    return same / len(store)


def check_purity(task: SyntheticTask, store: VectorStore, metric: Metric) -> float:
    """Measure purity and warn when it misses the configured target."""
    purity = neighbour_purity(store, metric)
    if purity < task.config.purity:
        _LOGGER.warning("Neighbour purity %.3f is below the target %.3f", purity, task.config.purity)
    else:
        _LOGGER.debug("Neighbour purity %.3f", purity)
    return purity


def seen_token_coverage(task: SyntheticTask, splits: SplitData) -> float:
    """Fraction of test prompts holding a cluster token that occurs in some training prompt.

    Token embeddings of unseen ids never receive a gradient, so this bounds what
    the prompt alone can teach the encoder.
    """
    noise = set(task.noise_tokens)
    seen = {token for ex in splits.train for token in ex.body if token not in noise}
    covered = sum(any(token in seen for token in ex.body) for ex in splits.test)
    return covered / len(splits.test)


def prompt_only_ceiling(task: SyntheticTask, splits: SplitData) -> float:
    """Best test accuracy without retrieval: covered prompts right, the rest at chance."""
    coverage = seen_token_coverage(task, splits)
    return coverage + (1.0 - coverage) / task.config.num_classes


def retrieval_vote_accuracy(
    task: SyntheticTask,
    splits: SplitData,
    store: VectorStore,
    k: int = DEFAULT_VOTE_K,
    metric: Metric = Metric.L2,
) -> float:
    """Test accuracy of a majority vote over the labels of the k retrieved pool entries."""
    correct = 0
    for example in splits.test:
        hits = top_k(store, task.embed(example.body), min(k, len(store)), metric)
        votes = np.bincount([hit.payload for hit in hits], minlength=task.config.num_classes)
        correct += int(np.argmax(votes) == example.label)
    return correct / len(splits.test)


def task_to_dict(task: SyntheticTask, splits: SplitData) -> dict[str, Any]:
    """JSON-ready description of the task and its splits."""

    def rows(examples: tuple[Example, ...]) -> list[dict[str, Any]]:
        return [{"id": ex.id, "tokens": list(ex.tokens), "label": ex.label} for ex in examples]

    return {
        "seed": task.seed,
        "vocab_size": task.vocab_size,
        "config": asdict(task.config),
        "bayes_accuracy": task.bayes_accuracy(),
        "train": rows(splits.train),
        "val": rows(splits.val),
        "test": rows(splits.test),
        "pool_ids": [ex.id for ex in splits.pool],
    }


def write_task(task: SyntheticTask, splits: SplitData, path: str | Path) -> None:
    Path(path).write_text(json.dumps(task_to_dict(task, splits), sort_keys=True, indent=1), encoding="utf-8")
