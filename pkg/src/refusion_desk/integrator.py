"""Adaptive retrieval integrator: a relaxed mixture over fusion candidates per site."""
from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from enum import StrEnum
import hashlib
import logging
import re

import numpy as np

from .autodiff import ArrayLike, DiffArray, Parameter, RngStream, Tape, add, getitem, mul, read, softmax
from .const import DEFAULT_TAU_START
from .exceptions import ConfigError, DimensionError, ModelError, ParameterError
from .fusion import (
    FusedLinear,
    FusionScale,
    FusionScheme,
    Linear,
    OrderedMaskParams,
    RerankerParams,
    hit_array,
    replace_row,
)

_LOGGER = logging.getLogger(__name__)

CANDIDATE_ORDER = (FusionScheme.NO_FUSION, FusionScheme.RERANKER, FusionScheme.ORDERED_MASK)


class SiteRole(StrEnum):
    """Linear module inside a layer that can host fusion."""

    QUERY = "Query"
    KEY = "Key"
    VALUE = "Value"
    FFN = "Ffn"


ROLE_ORDER = (SiteRole.QUERY, SiteRole.KEY, SiteRole.VALUE, SiteRole.FFN)


@dataclass(frozen=True)
class FusionSite:
    """A (layer, role) pair."""

    layer: int
    role: SiteRole

    @property
    def sort_key(self) -> tuple[int, int]:
        return self.layer, ROLE_ORDER.index(self.role)

    @property
    def name(self) -> str:
        return f"layers.{self.layer}.{self.role.value.lower()}"

    def __str__(self) -> str:
        return f"layer:{self.layer} role:{self.role.value}"


def sorted_sites(sites: Iterable[FusionSite]) -> list[FusionSite]:
    """Sites ordered by layer, then Query, Key, Value, Ffn."""
    return sorted(sites, key=lambda site: site.sort_key)


class ArchParams:
    """Architecture logits, one vector per fusion site."""

    def __init__(self, alphas: Mapping[FusionSite, Parameter]) -> None:
        """Initialize from per-site parameters."""
        self.alphas = dict(alphas)

    @classmethod
    def initial(cls, sites: Iterable[FusionSite], num_candidates: int) -> ArchParams:
        """All-zero logits, i.e. a uniform mixture."""
        if num_candidates < 1:
            raise ParameterError("at least one candidate is required")
        sites = sorted_sites(sites)
        if len(set(sites)) != len(sites):
            raise ConfigError("each fusion site may appear only once")
        return cls({site: Parameter(f"arch.{site.name}", np.zeros(num_candidates)) for site in sites})

    def __getitem__(self, site: FusionSite) -> Parameter:
        return self.alphas[site]

    def __len__(self) -> int:
        return len(self.alphas)

    @property
    def sites(self) -> list[FusionSite]:
        return sorted_sites(self.alphas)

    def parameters(self) -> list[Parameter]:
        return [self.alphas[site] for site in self.sites]

    def weights(self, site: FusionSite) -> np.ndarray:
        """Mixture weights softmax(alpha) for ``site``."""
        return softmax(self.alphas[site].value).values

    def snapshot(self) -> dict[str, list[float]]:
        """Per-site mixture weights keyed by the site's text form."""
        return {str(site): self.weights(site).tolist() for site in self.sites}

    def digest(self) -> str:
        """Short sha256 of the raw logits."""
        sha = hashlib.sha256()
        for parameter in self.parameters():
            sha.update(parameter.name.encode())
            sha.update(parameter.value.tobytes())
        return sha.hexdigest()[:16]


class IntegratorModule:
    """Candidates share one linear map and differ only in their fusion step."""

    def __init__(self, linear: Linear, candidates: Sequence[FusedLinear], alpha: Parameter) -> None:
        """Initialize and check the candidates share ``linear``."""
        if not candidates:
            raise ModelError("an integrator needs at least one candidate")
        if any(candidate.linear is not linear for candidate in candidates):
            raise ModelError("integrator candidates must share the same linear module")
        if alpha.shape != (len(candidates),):
            raise DimensionError(
                "architecture logits do not match the candidate count", alpha.shape, (len(candidates),)
            )
        rows = {candidate.fusion_row for candidate in candidates}
        if len(rows) != 1:
            raise ModelError("integrator candidates must fuse into the same row")
        self.linear = linear
        self.candidates = list(candidates)
        self.alpha = alpha
        self.fusion_row = rows.pop()

    @classmethod
    def build(
        cls,
        linear: Linear,
        schemes: Sequence[FusionScheme],
        name: str,
        k: int,
        alpha: Parameter,
        fusion_scale: FusionScale = FusionScale.ONE_OVER_K,
        tau: float = DEFAULT_TAU_START,
    ) -> IntegratorModule:
        """Create one candidate per scheme, each with fresh ranking parameters."""
        candidates = [
            FusedLinear(linear, make_scheme(scheme, name, linear.d_out, k, tau), fusion_scale=fusion_scale)
            for scheme in schemes
        ]
        return cls(linear, candidates, alpha)

    @property
    def needs_hits(self) -> bool:
        return any(candidate.needs_hits for candidate in self.candidates)

    @property
    def schemes(self) -> list[FusionScheme]:
        return [candidate.kind for candidate in self.candidates]

    def parameters(self) -> list[Parameter]:
        """Weight parameters; the architecture logits are excluded."""
        params = self.linear.parameters()
        for candidate in self.candidates:
            if candidate.scheme is not None:
                params.extend(candidate.scheme.parameters())
        return params

    def set_tau(self, tau: float) -> None:
        for candidate in self.candidates:
            candidate.set_tau(tau)

    def discretized(self, index: int) -> FusedLinear:
        """Return the chosen candidate."""
        if not 0 <= index < len(self.candidates):
            raise ParameterError(f"candidate index {index} out of range")
        return self.candidates[index]

    def forward(
        self,
        x: ArrayLike,
        hits: ArrayLike | None = None,
        tape: Tape | None = None,
        rng: RngStream | None = None,
        noise_free: bool = True,
    ) -> DiffArray:
        return mixture_forward(self, x, hits, rng, noise_free, tape)

    __call__ = forward


def make_scheme(
    scheme: FusionScheme, name: str, dim: int, k: int, tau: float = DEFAULT_TAU_START
) -> RerankerParams | OrderedMaskParams | None:
    """Fresh ranking parameters for ``scheme``."""
    if scheme is FusionScheme.RERANKER:
        return RerankerParams.initial(name, k)
    if scheme is FusionScheme.ORDERED_MASK:
        return OrderedMaskParams.initial(name, dim, k, tau)
    return None


def mixture_forward(
    integrator: IntegratorModule,
    x: ArrayLike,
    hits: ArrayLike | None = None,
    rng: RngStream | None = None,
    noise_free: bool = True,
    tape: Tape | None = None,
) -> DiffArray:
    """sum_i softmax(alpha)_i * o_i(x).

    Candidates agree everywhere except the fusion row, so the mixture is
    evaluated there only and other rows are the shared linear output.
    """
    if len(integrator.candidates) == 1:
        return integrator.candidates[0].forward(x, hits, tape, rng, noise_free)
    y = integrator.linear(x, tape)
    hits = hit_array(hits)
    if integrator.needs_hits and hits is None:
        raise ModelError("integrator with fusion candidates needs retrieval hits")
    weights = softmax(read(integrator.alpha, tape))
    row = getitem(y, (Ellipsis, integrator.fusion_row, slice(None)))
    mixed: DiffArray | None = None
    for i, candidate in enumerate(integrator.candidates):
        output = candidate.fuse_row(row, hits, tape, rng, noise_free) if candidate.needs_hits else row
        term = mul(getitem(weights, i), output)
        mixed = term if mixed is None else add(mixed, term)
    return replace_row(y, mixed, integrator.fusion_row)


def discretize(arch: ArchParams) -> dict[FusionSite, int]:
    """Argmax per site; ties go to the lowest candidate index."""
    return {site: int(np.argmax(arch[site].value)) for site in arch.sites}


def search_space_size(num_layers: int, roles_per_layer: int, num_candidates: int) -> int:
    """m ** (N * R), exact."""
    if min(num_layers, roles_per_layer, num_candidates) < 1:
        raise ParameterError("search space arguments must be positive")
    return num_candidates ** (num_layers * roles_per_layer)


def export_architecture(choices: Mapping[FusionSite, FusionScheme]) -> str:
    """One ``layer:<n> role:<Role> choice:<Scheme>`` line per site."""
    return "".join(f"{site} choice:{choices[site].value}\n" for site in sorted_sites(choices))


_ARCH_LINE = re.compile(r"^layer:(\d+) role:(\w+) choice:(\w+)$")


def parse_architecture(text: str) -> dict[FusionSite, FusionScheme]:
    """Inverse of ``export_architecture``."""
    choices: dict[FusionSite, FusionScheme] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        match = _ARCH_LINE.match(line.strip())
        if match is None:
            raise ConfigError(f"architecture line {number} is malformed: {line!r}")
        try:
            site = FusionSite(int(match[1]), SiteRole(match[2]))
            scheme = FusionScheme(match[3])
        except ValueError as err:
            raise ConfigError(f"architecture line {number}: {err}") from err
        if site in choices:
            raise ConfigError(f"architecture line {number} repeats {site}")
        choices[site] = scheme
    return choices
