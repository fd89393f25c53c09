"""Experiment configuration: typed sections and the dotted-key file format."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from enum import Enum
import io
import logging
from pathlib import Path
import types
import typing
from typing import Any, Union

from dotenv import dotenv_values

from .const import DEFAULT_K, DEFAULT_SEEDS
from .exceptions import ConfigError
from .fusion import FusionScheme
from .integrator import CANDIDATE_ORDER, SiteRole
from .model import AugmentationMode, ModelConfig
from .retriever import Metric, QueryMode
from .task import DataConfig
from .trainer import TrainConfig

_LOGGER = logging.getLogger(__name__)

NONE_LITERAL = "none"
ALL_LITERAL = "all"

# variant name -> (augmentation mode, candidate schemes)
VARIANTS: dict[str, tuple[AugmentationMode, tuple[FusionScheme, ...]]] = {
    "baseline": (AugmentationMode.NONE, CANDIDATE_ORDER),
    "concat": (AugmentationMode.CONCAT, CANDIDATE_ORDER),
    "reranker": (AugmentationMode.FUSION, (FusionScheme.RERANKER,)),
    "ordered-mask": (AugmentationMode.FUSION, (FusionScheme.ORDERED_MASK,)),
    "ari-reranker": (AugmentationMode.FUSION, (FusionScheme.NO_FUSION, FusionScheme.RERANKER)),
    "ari-ordered": (AugmentationMode.FUSION, (FusionScheme.NO_FUSION, FusionScheme.ORDERED_MASK)),
    "ari-all": (AugmentationMode.FUSION, CANDIDATE_ORDER),
    "rf-add": (AugmentationMode.FUSION, (FusionScheme.RERANKER,)),
}

# fused with the initial uniform weights, never trained
FIXED_RANKING_VARIANTS = frozenset({"rf-add"})

# sweep axis -> config key
SWEEP_AXES = {
    "k": "retrieval.k",
    "metric": "retrieval.metric",
    "fusion-sites": "model.fusion_roles",
    "query-mode": "retrieval.query_mode",
    "variant": "experiment.variant",
}


@dataclass(frozen=True)
class RetrievalConfig:
    """Store query settings."""

    k: int = DEFAULT_K
    metric: Metric = Metric.L2
    query_mode: QueryMode = QueryMode.INPUT_TEXT
    exclude_self: bool = True

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"retrieval.k must be at least 1, got {self.k}")


@dataclass(frozen=True)
class ExperimentSettings:
    """Run-level settings."""

    variant: str = "ari-all"
    output_dir: str = "runs/default"
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    workers: int = 1

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds repeat")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")


@dataclass(frozen=True)
class SweepSettings:
    """Default sweep for the ``sweep`` verb."""

    axis: str = "k"
    values: tuple[str, ...] = ("1", "2", "4", "8")
    flops_k: tuple[int, ...] = (0, 1, 2, 4, 8, 16)
    variants: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; expected one of {sorted(SWEEP_AXES)}")
        unknown = [name for name in self.variants if name not in VARIANTS]
        if unknown:
            raise ConfigError(f"unknown sweep variant(s) {unknown}; expected names from {sorted(VARIANTS)}")
        if self.variants and self.axis == "variant":
            raise ConfigError("sweep.variants cannot be combined with the variant axis")


SECTIONS = ("model", "train", "data", "retrieval", "experiment", "sweep")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs; round-trips through ``serialize``/``parse``."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)

    def __post_init__(self) -> None:
        mode, candidates = VARIANTS[self.experiment.variant]
        try:
            synced = replace(
                self.model,
                num_labels=self.data.num_classes,
                augmentation=mode,
                candidates=candidates,
                k=self.retrieval.k,
                learned_ranking=self.experiment.variant not in FIXED_RANKING_VARIANTS,
            )
        except ConfigError as err:
            raise ConfigError(f"model section inconsistent with variant/data: {err}") from err
        object.__setattr__(self, "model", synced)
        if self.data.prompt_len > self.model.max_len:
            raise ConfigError(f"prompt of {self.data.prompt_len} tokens exceeds model.max_len {self.model.max_len}")

    @property
    def variant(self) -> str:
        return self.experiment.variant

    @property
    def output_dir(self) -> Path:
        return Path(self.experiment.output_dir)

    def with_override(self, key: str, value: str) -> ExperimentConfig:
        """Return a copy with one dotted key replaced by its text value."""
        return parse_items({**to_items(self), key: value})

    def with_overrides(self, overrides: dict[str, str]) -> ExperimentConfig:
        return parse_items({**to_items(self), **overrides})

    def serialize(self) -> str:
        return serialize(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(serialize(self), encoding="utf-8")


# ---------------------------------------------------------------------------
# Text form


def format_value(value: Any) -> str:
    """Text form of one field value."""
    if value is None:
        return ALL_LITERAL
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(format_value(item) for item in value)
    return str(value)


def section_items(name: str, section: Any, include_derived: bool = False) -> dict[str, str]:
    """Dotted items for one dataclass section."""
    return {
        f"{name}.{item.name}": format_value(getattr(section, item.name))
        for item in fields(section)
        if include_derived or not item.metadata.get("derived")
    }


def to_items(config: ExperimentConfig) -> dict[str, str]:
    items: dict[str, str] = {}
    for name in SECTIONS:
        items.update(section_items(name, getattr(config, name)))
    return items


def serialize(config: ExperimentConfig) -> str:
    """One ``section.field=value`` line per field, grouped by section."""
    lines = []
    for name in SECTIONS:
        lines.append(f"# {name}")
        lines.extend(f"{key}={value}" for key, value in section_items(name, getattr(config, name)).items())
    return "\n".join(lines) + "\n"


def _coerce(text: str, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    if origin in (Union, types.UnionType):
        options = [arg for arg in typing.get_args(hint) if arg is not type(None)]
        if text.strip().lower() in (ALL_LITERAL, NONE_LITERAL):
            return None
        return _coerce(text, options[0], key)
    if origin is tuple:
        item_hint = typing.get_args(hint)[0]
        parts = [part.strip() for part in text.split(",") if part.strip()]
        return tuple(_coerce(part, item_hint, key) for part in parts)
    text = text.strip()
    try:
        if hint is bool:
            lowered = text.lower()
            if lowered not in ("true", "false"):
                raise ValueError(f"expected true or false, got {text!r}")
            return lowered == "true"
        if hint is Metric:
            return Metric.parse(text)
        if isinstance(hint, type) and issubclass(hint, Enum):
            return hint(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError as err:
        raise ConfigError(f"{key}: {err}") from err
    return text


def _build_section(cls: type, name: str, values: dict[str, str]) -> Any:
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for item in fields(cls):
        key = f"{name}.{item.name}"
        if key in values:
            kwargs[item.name] = _coerce(values[key], hints[item.name], key)
    return cls(**kwargs)


_SECTION_TYPES = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "retrieval": RetrievalConfig,
    "experiment": ExperimentSettings,
    "sweep": SweepSettings,
}


def known_keys(include_derived: bool = False) -> set[str]:
    return {
        f"{name}.{item.name}"
        for name, cls in _SECTION_TYPES.items()
        for item in fields(cls)
        if include_derived or not item.metadata.get("derived")
    }


def parse_items(values: dict[str, str | None]) -> ExperimentConfig:
    """Build a config from dotted items; missing keys take their defaults."""
    unknown = sorted(set(values) - known_keys())
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    missing_value = sorted(key for key, value in values.items() if value is None)
    if missing_value:
        raise ConfigError(f"configuration key(s) without a value: {', '.join(missing_value)}")
    sections = {name: _build_section(cls, name, values) for name, cls in _SECTION_TYPES.items()}
    return ExperimentConfig(**sections)


def parse(text: str) -> ExperimentConfig:
    """Parse the dotted-key text form."""
    return parse_items(dict(dotenv_values(stream=io.StringIO(text), interpolate=False)))


def load(path: str | Path) -> ExperimentConfig:
    """Load a config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    config = parse(path.read_text(encoding="utf-8"))
    _LOGGER.debug("Loaded configuration from %s (variant %s)", path, config.variant)
    return config


def model_config_text(model: ModelConfig, extra: dict[str, str] | None = None) -> str:
    """Full ModelConfig echo, derived fields included (used by checkpoints)."""
    items = section_items("model", model, include_derived=True)
    items.update(extra or {})
    return "".join(f"{key}={value}\n" for key, value in items.items())


def parse_model_config_text(text: str) -> tuple[ModelConfig, dict[str, str]]:
    """Inverse of ``model_config_text``; non-model keys are returned untouched."""
    values = dict(dotenv_values(stream=io.StringIO(text), interpolate=False))
    model_values = {key: value for key, value in values.items() if key.startswith("model.")}
    extra = {key: value or "" for key, value in values.items() if not key.startswith("model.")}
    allowed = {f"model.{item.name}" for item in fields(ModelConfig)}
    unknown = sorted(set(model_values) - allowed)
    if unknown:
        raise ConfigError(f"unknown model key(s): {', '.join(unknown)}")
    return _build_section(ModelConfig, "model", {k: v or "" for k, v in model_values.items()}), extra


def fusion_roles_value(text: str) -> str:
    """Sweep shorthand such as ``key+value`` to the ``model.fusion_roles`` form."""
    roles = []
    for part in text.replace("+", ",").split(","):
        part = part.strip()
        if not part:
            continue
        matches = [role for role in SiteRole if role.value.lower() == part.lower()]
        if not matches:
            raise ConfigError(f"unknown fusion role {part!r}")
        roles.append(matches[0].value)
    return ",".join(roles)


def sweep_override(axis: str, value: str) -> tuple[str, str]:
    """Map a sweep axis value to a (config key, text value) pair."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    if axis == "fusion-sites":
        return SWEEP_AXES[axis], fusion_roles_value(value)
    return SWEEP_AXES[axis], value
