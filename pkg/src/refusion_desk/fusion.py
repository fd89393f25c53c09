"""Ranking schemes that fuse retrieval vectors into a linear layer's output."""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum
import logging

import numpy as np

from .autodiff import (
    ArrayLike,
    DiffArray,
    Parameter,
    RngStream,
    Tape,
    add,
    as_array,
    clip,
    concat,
    exclusive_cumsum,
    getitem,
    gumbel_softmax_sample,
    matmul,
    mul,
    read,
    reduce_sum,
    reshape,
    softmax,
    sub,
    swapaxes,
    transpose,
)
from .const import BETA_RAMP_STEP, DEFAULT_TAU_START
from .exceptions import DimensionError, ModelError, ParameterError
from .retriever import RetrievalHit, RetrievalResult

_LOGGER = logging.getLogger(__name__)


class FusionScheme(StrEnum):
    """Candidate fusion behaviours for one site."""

    NO_FUSION = "NoFusion"
    RERANKER = "Reranker"
    ORDERED_MASK = "OrderedMask"


class FusionScale(StrEnum):
    """Factor applied to the fused retrieval mass."""

    ONE_OVER_K = "OneOverK"
    ONE = "One"


def scale_factor(scale: FusionScale, k: int) -> float:
    """Return 1/k for OneOverK and 1 otherwise."""
    return 1.0 / k if scale is FusionScale.ONE_OVER_K else 1.0


@dataclass
class RerankerParams:
    """Learnable ranking logits over the k retrievals."""

    logits: Parameter

    @classmethod
    def initial(cls, name: str, k: int) -> RerankerParams:
        """Zero logits, i.e. uniform weights."""
        if k < 1:
            raise ParameterError(f"k must be at least 1, got {k}")
        return cls(Parameter(f"{name}.reranker", np.zeros(k)))

    @property
    def k(self) -> int:
        return self.logits.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.logits]

    def weights(self) -> np.ndarray:
        return rerank_weights(self.logits.value).values


@dataclass
class OrderedMaskParams:
    """Per-dimension Gumbel logits over the dropped retrieval index."""

    beta: Parameter
    tau: float = DEFAULT_TAU_START

    def __post_init__(self) -> None:
        if self.beta.value.ndim != 2:
            raise DimensionError("ordered-mask logits must be D x k", self.beta.shape)
        self.set_tau(self.tau)

    @classmethod
    def initial(cls, name: str, dim: int, k: int, tau: float = DEFAULT_TAU_START) -> OrderedMaskParams:
        """Descending ramp (k - i) * 0.1 on every dimension."""
        if k < 1:
            raise ParameterError(f"k must be at least 1, got {k}")
        ramp = (k - np.arange(k)) * BETA_RAMP_STEP
        return cls(Parameter(f"{name}.beta", np.tile(ramp, (dim, 1))), tau)

    @property
    def k(self) -> int:
        return self.beta.shape[1]

    def set_tau(self, tau: float) -> None:
        if not tau > 0:
            raise ParameterError(f"temperature must be positive, got {tau}")
        self.tau = float(tau)

    def parameters(self) -> list[Parameter]:
        return [self.beta]


SchemeParams = RerankerParams | OrderedMaskParams | None


def rerank_weights(logits: ArrayLike) -> DiffArray:
    """Softmax over the ranking logits."""
    logits = as_array(logits)
    if logits.ndim != 1 or logits.shape[0] < 1:
        raise ParameterError(f"reranker logits must be a non-empty vector, got shape {logits.shape}")
    return softmax(logits)


def _check_hits(h: DiffArray, hits: DiffArray) -> int:
    if hits.ndim < 2 or hits.shape[-1] != h.shape[-1]:
        raise DimensionError("retrieval vectors do not match the fused row", hits.shape, h.shape)
    if hits.shape[:-2] != h.shape[:-1]:
        raise DimensionError("retrieval batch does not match the fused row batch", hits.shape, h.shape)
    return hits.shape[-2]


def fuse_reranked(
    h: ArrayLike,
    hits: ArrayLike,
    logits: ArrayLike,
    scale: FusionScale = FusionScale.ONE_OVER_K,
) -> DiffArray:
    """h + s * sum_i w_i * h_z_i with w = softmax(logits).

    ``h`` is (..., D) and ``hits`` is (..., k, D) with matching leading dims.
    """
    h, hits, logits = as_array(h), as_array(hits), as_array(logits)
    k = _check_hits(h, hits)
    if logits.shape != (k,):
        raise DimensionError("reranker logits do not match k", logits.shape, (k,))
    weights = reshape(rerank_weights(logits), (1, k))
    mixed = reshape(matmul(weights, hits), h.shape)
    return add(h, mul(mixed, scale_factor(scale, k)))


def sample_ordered_masks(
    beta: ArrayLike,
    tau: float,
    rng: RngStream | None,
    noise_free: bool = False,
    batch_shape: tuple[int, ...] = (),
) -> DiffArray:
    """Keep-masks V (..., D, k): v = 1 - exclusive_cumsum(c), c ~ GumbelSoftmax(beta / tau)."""
    beta = as_array(beta)
    shape = None if noise_free else tuple(batch_shape) + beta.shape
    choice = gumbel_softmax_sample(beta, tau, rng, noise_free, shape=shape)
    return clip(sub(1.0, exclusive_cumsum(choice)), 0.0, 1.0)


def fuse_ordered_masked(
    h: ArrayLike,
    hits: ArrayLike,
    masks: ArrayLike,
    scale: FusionScale = FusionScale.ONE_OVER_K,
) -> DiffArray:
    """h + s * sum_i V[:, i] * h_z_i, masking each dimension independently."""
    h, hits, masks = as_array(h), as_array(hits), as_array(masks)
    k = _check_hits(h, hits)
    if masks.shape[-2:] != (h.shape[-1], k):
        raise DimensionError("masks must be D x k", masks.shape, (h.shape[-1], k))
    masked = mul(swapaxes(masks, -1, -2), hits)
    return add(h, mul(reduce_sum(masked, axis=-2), scale_factor(scale, k)))


@dataclass
class Linear:
    """Affine map y = x W^T + b."""

    weight: Parameter
    bias: Parameter

    @classmethod
    def initial(cls, name: str, d_in: int, d_out: int, rng: RngStream, std: float) -> Linear:
        """Normal weights, zero bias."""
        return cls(
            Parameter(f"{name}.weight", rng.normal((d_out, d_in), std)),
            Parameter(f"{name}.bias", np.zeros(d_out)),
        )

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, x: ArrayLike, tape: Tape | None = None) -> DiffArray:
        x = as_array(x)
        if x.shape[-1] != self.d_in:
            raise DimensionError("linear input width mismatch", x.shape, self.weight.shape)
        return add(matmul(x, transpose(read(self.weight, tape))), read(self.bias, tape))


def hit_array(hits: ArrayLike | Sequence[RetrievalHit] | RetrievalResult | None) -> DiffArray | None:
    """Normalize hits given as an array, hit list or retrieval result."""
    if hits is None or isinstance(hits, DiffArray):
        return hits
    if isinstance(hits, RetrievalResult):
        return DiffArray(hits.vectors())
    if isinstance(hits, (list, tuple)) and hits and isinstance(hits[0], RetrievalHit):
        return DiffArray(np.stack([hit.vector for hit in hits]))
    return DiffArray(np.asarray(hits, dtype=np.float64))


def replace_row(y: DiffArray, row: DiffArray, index: int) -> DiffArray:
    """Return ``y`` with row ``index`` of its second-to-last axis replaced; other rows are copied."""
    width = y.shape[-1]
    pieces = [
        getitem(y, (Ellipsis, slice(0, index), slice(None))),
        reshape(row, row.shape[:-1] + (1, width)),
        getitem(y, (Ellipsis, slice(index + 1, None), slice(None))),
    ]
    return concat(pieces, axis=-2)


class FusedLinear:
    """Linear layer whose classification-token row absorbs retrieval vectors."""

    def __init__(
        self,
        linear: Linear,
        scheme: SchemeParams = None,
        fusion_row: int = 0,
        fusion_scale: FusionScale = FusionScale.ONE_OVER_K,
        train_scheme: bool = True,
    ) -> None:
        """Initialize around an existing linear map.

        With ``train_scheme`` off the scheme keeps its initial values and is
        left out of ``parameters``.
        """
        if isinstance(scheme, OrderedMaskParams) and scheme.beta.shape[0] != linear.d_out:
            raise DimensionError(
                "ordered-mask logits do not match the output width", scheme.beta.shape, (linear.d_out,)
            )
        self.linear = linear
        self.scheme = scheme
        self.fusion_row = fusion_row
        self.fusion_scale = fusion_scale
        self.train_scheme = train_scheme

    @property
    def kind(self) -> FusionScheme:
        if isinstance(self.scheme, RerankerParams):
            return FusionScheme.RERANKER
        if isinstance(self.scheme, OrderedMaskParams):
            return FusionScheme.ORDERED_MASK
        return FusionScheme.NO_FUSION

    @property
    def needs_hits(self) -> bool:
        return self.scheme is not None

    def parameters(self) -> list[Parameter]:
        """Linear weights followed by the scheme's parameters."""
        scheme = self.scheme.parameters() if self.scheme is not None and self.train_scheme else []
        return self.linear.parameters() + scheme

    def set_tau(self, tau: float) -> None:
        if isinstance(self.scheme, OrderedMaskParams):
            self.scheme.set_tau(tau)

    def fuse_row(
        self,
        row: DiffArray,
        hits: DiffArray,
        tape: Tape | None = None,
        rng: RngStream | None = None,
        noise_free: bool = True,
    ) -> DiffArray:
        """Apply this module's scheme to an already projected row."""
        if isinstance(self.scheme, RerankerParams):
            return fuse_reranked(row, hits, read(self.scheme.logits, tape), self.fusion_scale)
        if isinstance(self.scheme, OrderedMaskParams):
            masks = sample_ordered_masks(
                read(self.scheme.beta, tape), self.scheme.tau, rng, noise_free, batch_shape=hits.shape[:-2]
            )
            return fuse_ordered_masked(row, hits, masks, self.fusion_scale)
        return row

    def forward(
        self,
        x: ArrayLike,
        hits: ArrayLike | Sequence[RetrievalHit] | RetrievalResult | None = None,
        tape: Tape | None = None,
        rng: RngStream | None = None,
        noise_free: bool = True,
    ) -> DiffArray:
        """Project ``x`` (..., L, D_in) and fuse hits into the fusion row."""
        y = self.linear(x, tape)
        if self.scheme is None:
            return y
        hits = hit_array(hits)
        if hits is None:
            raise ModelError(f"{self.kind} fusion needs retrieval hits")
        if y.ndim < 2 or not 0 <= self.fusion_row < y.shape[-2]:
            raise DimensionError("output has no fusion row", y.shape)
        row = getitem(y, (Ellipsis, self.fusion_row, slice(None)))
        return replace_row(y, self.fuse_row(row, hits, tape, rng, noise_free), self.fusion_row)

    __call__ = forward


def forward_fused_linear(
    module: FusedLinear,
    x: ArrayLike,
    hits: ArrayLike | Sequence[RetrievalHit] | RetrievalResult | None = None,
    rng: RngStream | None = None,
    noise_free: bool = True,
    tape: Tape | None = None,
) -> DiffArray:
    """Functional form of ``FusedLinear.forward``."""
    return module.forward(x, hits, tape, rng, noise_free)
