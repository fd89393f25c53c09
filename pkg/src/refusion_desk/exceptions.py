"""Exceptions raised by the refusion-desk toolkit."""
from __future__ import annotations

from typing import Any


class RefusionError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(RefusionError):
    """Operand shapes do not agree."""

    def __init__(self, message: str, *shapes: tuple[int, ...]) -> None:
        """Initialize with the offending shapes appended to the message."""
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class ParameterError(RefusionError):
    """A hyperparameter or index is outside its valid range."""


class StoreBuildError(RefusionError):
    """Vector store entries are inconsistent."""


class StoreFormatError(RefusionError):
    """A persisted vector store could not be decoded."""

    def __init__(self, message: str, offset: int) -> None:
        """Initialize with the byte offset where decoding failed."""
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class RetrievalError(RefusionError):
    """A retrieval query could not be served."""


class ModelError(RefusionError):
    """Model inputs are invalid for the configured forward pass."""


class CheckpointFormatError(RefusionError):
    """A checkpoint file could not be decoded or does not match the model."""

    def __init__(self, message: str, offset: int = -1) -> None:
        """Initialize with the byte offset where decoding failed (-1 if unknown)."""
        if offset >= 0:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(RefusionError):
    """Optimization diverged or was misconfigured."""

    def __init__(self, message: str, step: int, diagnostics: dict[str, Any] | None = None) -> None:
        """Initialize with the failing step and optional diagnostics."""
        super().__init__(f"{message} (step {step})")
        self.step = step
        self.diagnostics = diagnostics or {}


class ConfigError(RefusionError):
    """Experiment configuration is invalid."""
