"""Test configuration and fixtures."""
from __future__ import annotations

import os
from pathlib import Path

from dotenv import load_dotenv
import numpy as np
import pytest

from refusion_desk.autodiff import RngStream
from refusion_desk.config import ExperimentConfig
from refusion_desk.const import DEFAULT_SEEDS
from refusion_desk.fusion import FusionScheme
from refusion_desk.integrator import CANDIDATE_ORDER
from refusion_desk.model import AugmentationMode, ModelConfig
from refusion_desk.retriever import StoreEntry, VectorStore, build_store

# Load environment variables from .env file
load_dotenv()


def acceptance_seeds() -> tuple[int, ...]:
    """Seeds for end-to-end runs; REFUSION_SEEDS=13,21 shrinks them."""
    raw = os.getenv("REFUSION_SEEDS")
    if not raw:
        return DEFAULT_SEEDS
    return tuple(int(part) for part in raw.split(",") if part.strip())


def tiny_model_config(
    augmentation: AugmentationMode = AugmentationMode.FUSION,
    candidates: tuple[FusionScheme, ...] = CANDIDATE_ORDER,
    k: int = 2,
    **overrides,
) -> ModelConfig:
    """One-layer D=8 encoder used by the gradient and model tests."""
    settings = dict(
        num_layers=1,
        hidden=8,
        heads=2,
        vocab_size=16,
        max_len=24,
        ffn_mult=2,
        init_std=0.3,
        num_labels=3,
        augmentation=augmentation,
        candidates=candidates,
        k=k,
    )
    settings.update(overrides)
    return ModelConfig(**settings)


def random_store(count: int, dim: int, seed: int = 0, labels: int = 3) -> VectorStore:
    rng = np.random.default_rng(seed)
    vectors = rng.normal(size=(count, dim))
    return build_store(StoreEntry(i, vectors[i], i % labels) for i in range(count))


def fast_experiment(tmp_path: Path, variant: str = "ari-all", **overrides: str) -> ExperimentConfig:
    """Small experiment that finishes in seconds."""
    items = {
        "model.hidden": "16",
        "model.num_layers": "1",
        "model.vocab_size": "64",
        "train.steps": "6",
        "train.batch_size": "8",
        "train.eval_interval": "3",
        "data.num_classes": "2",
        "data.shots": "4",
        "data.val_shots": "4",
        "data.test_per_class": "8",
        "data.pool_extra_per_class": "4",
        "data.cluster_size": "4",
        "retrieval.k": "2",
        "experiment.variant": variant,
        "experiment.output_dir": str(tmp_path / "run"),
        "experiment.seeds": "13,21",
    }
    items.update(overrides)
    return ExperimentConfig().with_overrides(items)


@pytest.fixture
def rng() -> RngStream:
    """Seeded random stream."""
    return RngStream(1234)


@pytest.fixture
def fusion_config() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def store() -> VectorStore:
    """Twelve labelled 8-dimensional entries."""
    return random_store(12, 8, seed=7)


@pytest.fixture
def experiment(tmp_path: Path) -> ExperimentConfig:
    return fast_experiment(tmp_path)
