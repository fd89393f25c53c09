"""Toy pre-norm transformer encoder with masked-token classification."""
from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
import logging
import math

import numpy as np

from .autodiff import (
    DiffArray,
    Parameter,
    RngStream,
    Tape,
    add,
    concat,
    cross_entropy,
    gather_positions,
    gelu,
    getitem,
    layer_norm,
    matmul,
    mul,
    read,
    reshape,
    softmax,
    swapaxes,
    take_rows,
    transpose,
)
from .const import (
    CLS_TOKEN_ID,
    DEFAULT_FFN_MULT,
    DEFAULT_HEADS,
    DEFAULT_HIDDEN,
    DEFAULT_INIT_STD,
    DEFAULT_K,
    DEFAULT_MAX_LEN,
    DEFAULT_NUM_CLASSES,
    DEFAULT_NUM_LAYERS,
    DEFAULT_TAU_START,
    DEFAULT_VOCAB_SIZE,
    FIRST_LABEL_TOKEN_ID,
    MASK_TOKEN_ID,
    SEP_TOKEN_ID,
    SPECIAL_TOKEN_IDS,
)
from .exceptions import ConfigError, DimensionError, ModelError
from .fusion import FusedLinear, FusionScale, FusionScheme, Linear
from .integrator import (
    CANDIDATE_ORDER,
    ArchParams,
    FusionSite,
    IntegratorModule,
    SiteRole,
    make_scheme,
    sorted_sites,
)
from .retriever import RetrievalContext, Retriever

_LOGGER = logging.getLogger(__name__)

DERIVED = {"derived": True}


class AugmentationMode(StrEnum):
    """How retrieval reaches the encoder."""

    NONE = "None"
    CONCAT = "Concat"
    FUSION = "Fusion"


@dataclass(frozen=True)
class ModelConfig:
    """Encoder shape and fusion placement.

    Fields marked derived are filled from the experiment's data, retrieval and
    variant settings and are not written to config files.
    """

    num_layers: int = DEFAULT_NUM_LAYERS
    hidden: int = DEFAULT_HIDDEN
    heads: int = DEFAULT_HEADS
    vocab_size: int = DEFAULT_VOCAB_SIZE
    max_len: int = DEFAULT_MAX_LEN
    ffn_mult: int = DEFAULT_FFN_MULT
    init_std: float = DEFAULT_INIT_STD
    fusion_roles: tuple[SiteRole, ...] = (SiteRole.KEY, SiteRole.VALUE)
    fusion_layers: tuple[int, ...] | None = None
    fusion_scale: FusionScale = FusionScale.ONE_OVER_K
    num_labels: int = field(default=DEFAULT_NUM_CLASSES, metadata=DERIVED)
    augmentation: AugmentationMode = field(default=AugmentationMode.NONE, metadata=DERIVED)
    candidates: tuple[FusionScheme, ...] = field(default=CANDIDATE_ORDER, metadata=DERIVED)
    k: int = field(default=DEFAULT_K, metadata=DERIVED)
    learned_ranking: bool = field(default=True, metadata=DERIVED)

    def __post_init__(self) -> None:
        if min(self.num_layers, self.hidden, self.heads, self.ffn_mult, self.num_labels, self.k) < 1:
            raise ConfigError("model sizes, label count and k must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if FIRST_LABEL_TOKEN_ID + self.num_labels > self.vocab_size:
            raise ConfigError(f"{self.num_labels} label tokens do not fit a vocabulary of {self.vocab_size}")
        if self.max_len < len(SPECIAL_TOKEN_IDS):
            raise ConfigError(f"max_len must be at least {len(SPECIAL_TOKEN_IDS)}")
        if not self.candidates:
            raise ConfigError("candidate list is empty")
        if len(set(self.fusion_roles)) != len(self.fusion_roles):
            raise ConfigError("fusion roles repeat")
        if self.fusion_layers is not None:
            bad = [layer for layer in self.fusion_layers if not 0 <= layer < self.num_layers]
            if bad or len(set(self.fusion_layers)) != len(self.fusion_layers):
                raise ConfigError(f"fusion layers {list(self.fusion_layers)} invalid for {self.num_layers} layers")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def ffn_hidden(self) -> int:
        return self.hidden * self.ffn_mult

    @property
    def label_token_ids(self) -> tuple[int, ...]:
        return tuple(range(FIRST_LABEL_TOKEN_ID, FIRST_LABEL_TOKEN_ID + self.num_labels))

    @property
    def fusion_sites(self) -> tuple[FusionSite, ...]:
        """Sites that host fusion; empty unless augmentation is Fusion."""
        if self.augmentation is not AugmentationMode.FUSION:
            return ()
        layers = range(self.num_layers) if self.fusion_layers is None else self.fusion_layers
        return tuple(sorted_sites(FusionSite(layer, role) for layer in layers for role in self.fusion_roles))

    @property
    def searched(self) -> bool:
        return bool(self.fusion_sites) and len(self.candidates) > 1


@dataclass(frozen=True)
class Example:
    """Token ids with exactly one mask position and a gold label index."""

    id: int
    tokens: tuple[int, ...]
    label: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(token) for token in self.tokens))
        masks = self.tokens.count(MASK_TOKEN_ID)
        if masks != 1:
            raise ModelError(f"example {self.id} has {masks} mask positions, expected exactly one")

    @property
    def mask_position(self) -> int:
        return self.tokens.index(MASK_TOKEN_ID)

    @property
    def body(self) -> tuple[int, ...]:
        """Non-special tokens."""
        return tuple(token for token in self.tokens if token not in SPECIAL_TOKEN_IDS)


def build_concat_tokens(
    prompt: Sequence[int],
    documents: Sequence[Sequence[int]],
    max_len: int,
) -> tuple[int, ...]:
    """[cls] z1 [sep] ... zk [sep] prompt[1:], cut from the end of the retrieval block to fit."""
    prompt = tuple(prompt)
    if len(prompt) > max_len:
        raise ModelError(f"prompt of {len(prompt)} tokens exceeds max_len {max_len}")
    if not prompt or prompt[0] != CLS_TOKEN_ID:
        raise ModelError("prompt must start with the classification token")
    if not documents:
        return prompt
    block = [CLS_TOKEN_ID]
    for document in documents:
        block.extend(int(token) for token in document)
        block.append(SEP_TOKEN_ID)
    room = max_len - (len(prompt) - 1)
    if len(block) > room:
        _LOGGER.debug("Truncating retrieval block from %d to %d tokens", len(block), room)
        block = block[:room]
    return tuple(block) + prompt[1:]


SiteModule = FusedLinear | IntegratorModule


@dataclass
class EncoderLayer:
    """Parameters of one pre-norm block."""

    ln1_gain: Parameter
    ln1_bias: Parameter
    query: SiteModule
    key: SiteModule
    value: SiteModule
    out: Linear
    ln2_gain: Parameter
    ln2_bias: Parameter
    ffn_in: Linear
    ffn_out: SiteModule

    def module(self, role: SiteRole) -> SiteModule:
        return {
            SiteRole.QUERY: self.query,
            SiteRole.KEY: self.key,
            SiteRole.VALUE: self.value,
            SiteRole.FFN: self.ffn_out,
        }[role]

    def replace(self, role: SiteRole, module: SiteModule) -> None:
        attribute = "ffn_out" if role is SiteRole.FFN else role.value.lower()
        setattr(self, attribute, module)

    def parameters(self) -> list[Parameter]:
        params = [self.ln1_gain, self.ln1_bias]
        for module in (self.query, self.key, self.value):
            params.extend(module.parameters())
        params.extend(self.out.parameters())
        params.extend([self.ln2_gain, self.ln2_bias])
        params.extend(self.ffn_in.parameters())
        params.extend(self.ffn_out.parameters())
        return params


class EncoderModel:
    """Encoder whose classifier is tied to the label-token embeddings."""

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        """Initialize parameters from ``seed``."""
        self.config = config
        rng = RngStream(seed)
        std = config.init_std
        d = config.hidden
        self.token_embedding = Parameter("embeddings.token", rng.normal((config.vocab_size, d), std))
        self.position_embedding = Parameter("embeddings.position", rng.normal((config.max_len, d), std))
        self.arch: ArchParams | None = (
            ArchParams.initial(config.fusion_sites, len(config.candidates)) if config.searched else None
        )
        sites = set(config.fusion_sites)
        self.layers: list[EncoderLayer] = []
        for index in range(config.num_layers):
            prefix = f"layers.{index}"

            def site_module(role: SiteRole, linear: Linear) -> SiteModule:
                site = FusionSite(index, role)
                if site not in sites:
                    return FusedLinear(linear)
                if self.arch is not None:
                    return IntegratorModule.build(
                        linear, config.candidates, site.name, config.k, self.arch[site], config.fusion_scale
                    )
                scheme = make_scheme(config.candidates[0], site.name, linear.d_out, config.k)
                return FusedLinear(
                    linear, scheme, fusion_scale=config.fusion_scale, train_scheme=config.learned_ranking
                )

            self.layers.append(
                EncoderLayer(
                    ln1_gain=Parameter(f"{prefix}.ln1.gain", np.ones(d)),
                    ln1_bias=Parameter(f"{prefix}.ln1.bias", np.zeros(d)),
                    query=site_module(SiteRole.QUERY, Linear.initial(f"{prefix}.query", d, d, rng, std)),
                    key=site_module(SiteRole.KEY, Linear.initial(f"{prefix}.key", d, d, rng, std)),
                    value=site_module(SiteRole.VALUE, Linear.initial(f"{prefix}.value", d, d, rng, std)),
                    out=Linear.initial(f"{prefix}.out", d, d, rng, std),
                    ln2_gain=Parameter(f"{prefix}.ln2.gain", np.ones(d)),
                    ln2_bias=Parameter(f"{prefix}.ln2.bias", np.zeros(d)),
                    ffn_in=Linear.initial(f"{prefix}.ffn_in", d, config.ffn_hidden, rng, std),
                    ffn_out=site_module(
                        SiteRole.FFN, Linear.initial(f"{prefix}.ffn_out", config.ffn_hidden, d, rng, std)
                    ),
                )
            )
        self.final_gain = Parameter("final_ln.gain", np.ones(d))
        self.final_bias = Parameter("final_ln.bias", np.zeros(d))
        self.tau = DEFAULT_TAU_START
        self.capture_attention = False
        self.attention_maps: list[np.ndarray] = []
        _LOGGER.debug(
            "Built encoder: %d layers, hidden %d, %d fusion sites, searched=%s",
            config.num_layers,
            d,
            len(sites),
            config.searched,
        )

    # -- parameters -----------------------------------------------------

    def weight_parameters(self) -> list[Parameter]:
        """Everything the lower level trains, architecture logits excluded."""
        params = [self.token_embedding, self.position_embedding]
        for layer in self.layers:
            params.extend(layer.parameters())
        params.extend([self.final_gain, self.final_bias])
        return params

    def arch_parameters(self) -> list[Parameter]:
        return self.arch.parameters() if self.arch is not None else []

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.weight_parameters() + self.arch_parameters()}

    def site_modules(self) -> dict[FusionSite, SiteModule]:
        return {site: self.layers[site.layer].module(site.role) for site in self.config.fusion_sites}

    @property
    def needs_hits(self) -> bool:
        return any(module.needs_hits for module in self.site_modules().values())

    def set_tau(self, tau: float) -> None:
        """Set the Gumbel-Softmax temperature of every ordered-mask scheme."""
        self.tau = float(tau)
        for module in self.site_modules().values():
            module.set_tau(tau)

    # -- architecture -----------------------------------------------------

    def architecture(self) -> dict[FusionSite, FusionScheme] | None:
        """The fixed scheme per site, or None while a mixture is still being searched."""
        modules = self.site_modules()
        if any(isinstance(module, IntegratorModule) for module in modules.values()):
            return None
        return {site: module.kind for site, module in modules.items()}

    def discretize(self, choices: Mapping[FusionSite, int]) -> dict[FusionSite, FusionScheme]:
        """Replace every mixture by its chosen candidate and drop the architecture logits."""
        for site, module in self.site_modules().items():
            if not isinstance(module, IntegratorModule):
                continue
            if site not in choices:
                raise ModelError(f"no architecture choice for {site}")
            self.layers[site.layer].replace(site.role, module.discretized(choices[site]))
        self.arch = None
        chosen = self.architecture() or {}
        _LOGGER.info("Discretized architecture: %s", {str(s): c.value for s, c in chosen.items()})
        return chosen

    def apply_architecture(self, schemes: Mapping[FusionSite, FusionScheme]) -> None:
        """Discretize from scheme names rather than candidate indices."""
        choices: dict[FusionSite, int] = {}
        for site, scheme in schemes.items():
            if scheme not in self.config.candidates:
                raise ModelError(f"{scheme} is not a candidate for {site}")
            choices[site] = self.config.candidates.index(scheme)
        self.discretize(choices)

    # -- forward ----------------------------------------------------------

    def _project(
        self,
        module: SiteModule,
        site: FusionSite,
        x: DiffArray,
        residual: DiffArray,
        context: RetrievalContext | None,
        tape: Tape | None,
        rng: RngStream | None,
        noise_free: bool,
    ) -> DiffArray:
        hits = None
        if module.needs_hits:
            if context is None:
                raise ModelError(f"missing retrieval hits for {site}")
            hits = DiffArray(context.hits_for(site, residual.values[:, 0, :]))
            if hits.shape[0] != x.shape[0]:
                raise DimensionError("retrieval batch does not match the input batch", hits.shape, x.shape)
        return module.forward(x, hits, tape, rng, noise_free)

    def _attention(self, layer: EncoderLayer, index: int, x: DiffArray, context, tape, rng, noise_free) -> DiffArray:
        cfg = self.config
        batch, length, width = x.shape
        a = layer_norm(x, read(layer.ln1_gain, tape), read(layer.ln1_bias, tape))
        q = self._project(layer.query, FusionSite(index, SiteRole.QUERY), a, x, context, tape, rng, noise_free)
        k = self._project(layer.key, FusionSite(index, SiteRole.KEY), a, x, context, tape, rng, noise_free)
        v = self._project(layer.value, FusionSite(index, SiteRole.VALUE), a, x, context, tape, rng, noise_free)

        def heads(t: DiffArray) -> DiffArray:
            return transpose(reshape(t, (batch, length, cfg.heads, cfg.head_dim)), (0, 2, 1, 3))

        scores = mul(matmul(heads(q), swapaxes(heads(k))), 1.0 / math.sqrt(cfg.head_dim))
        _check_shape(scores, (batch, cfg.heads, length, length))
        probs = softmax(scores, axis=-1)
        if self.capture_attention:
            self.attention_maps.append(probs.values.copy())
        mixed = matmul(probs, heads(v))
        merged = reshape(transpose(mixed, (0, 2, 1, 3)), (batch, length, width))
        return add(x, layer.out(merged, tape))

    def _feed_forward(self, layer: EncoderLayer, index: int, x: DiffArray, context, tape, rng, noise_free) -> DiffArray:
        b = layer_norm(x, read(layer.ln2_gain, tape), read(layer.ln2_bias, tape))
        hidden = gelu(layer.ffn_in(b, tape))
        site = FusionSite(index, SiteRole.FFN)
        return add(x, self._project(layer.ffn_out, site, hidden, x, context, tape, rng, noise_free))

    def forward_batch(
        self,
        tokens: Sequence[Sequence[int]] | np.ndarray,
        context: RetrievalContext | None = None,
        tape: Tape | None = None,
        rng: RngStream | None = None,
        noise_free: bool = True,
    ) -> DiffArray:
        """Label logits (B, C) at each row's mask position."""
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise DimensionError("tokens must be (batch, length)", tokens.shape)
        batch, length = tokens.shape
        if length > cfg.max_len:
            raise ModelError(f"sequence of {length} tokens exceeds max_len {cfg.max_len}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ModelError("token id outside the vocabulary")
        mask_rows, mask_cols = np.nonzero(tokens == MASK_TOKEN_ID)
        if not np.array_equal(mask_rows, np.arange(batch)):
            raise ModelError("every sequence needs exactly one mask position")

        embedding = read(self.token_embedding, tape)
        x = add(take_rows(embedding, tokens), getitem(read(self.position_embedding, tape), slice(0, length)))
        if self.capture_attention:
            self.attention_maps = []
        for index, layer in enumerate(self.layers):
            x = self._attention(layer, index, x, context, tape, rng, noise_free)
            x = self._feed_forward(layer, index, x, context, tape, rng, noise_free)
            _check_shape(x, (batch, length, cfg.hidden))
        x = layer_norm(x, read(self.final_gain, tape), read(self.final_bias, tape))
        at_mask = gather_positions(x, mask_cols)
        labels = take_rows(embedding, np.asarray(cfg.label_token_ids))
        return matmul(at_mask, transpose(labels))

    def forward(
        self,
        example: Example,
        hits: RetrievalContext | np.ndarray | None = None,
        tape: Tape | None = None,
        rng: RngStream | None = None,
        noise_free: bool = True,
    ) -> DiffArray:
        """Label logits (C,) for one example; ``hits`` may be a (k, D) array."""
        context = hits if isinstance(hits, RetrievalContext) or hits is None else RetrievalContext.static(hits)
        logits = self.forward_batch([example.tokens], context, tape, rng, noise_free)
        return reshape(logits, (self.config.num_labels,))

    def forward_concat(
        self,
        example: Example,
        documents: Sequence[Sequence[int]],
        k: int | None = None,
        tape: Tape | None = None,
    ) -> DiffArray:
        """Logits after prepending the first ``k`` retrieved documents to the prompt."""
        if k is not None:
            documents = list(documents)[:k]
        stream = build_concat_tokens(example.tokens, documents, self.config.max_len)
        return reshape(self.forward_batch([stream], None, tape), (self.config.num_labels,))

    def batch_logits(
        self,
        batch: Sequence[Example],
        retriever: Retriever | None = None,
        tape: Tape | None = None,
        rng: RngStream | None = None,
        noise_free: bool = True,
    ) -> DiffArray:
        """Logits for a batch, building retrieval inputs per the augmentation mode."""
        if not batch:
            raise ModelError("batch is empty")
        mode = self.config.augmentation
        if mode is AugmentationMode.CONCAT:
            if retriever is None:
                raise ModelError("concatenation needs a retriever")
            streams = [
                build_concat_tokens(ex.tokens, retriever.neighbor_documents(ex), self.config.max_len) for ex in batch
            ]
            return self._grouped(streams, [None] * len(batch), tape, rng, noise_free)
        if not self.needs_hits:
            return self._grouped([ex.tokens for ex in batch], [None] * len(batch), tape, rng, noise_free)
        if retriever is None:
            raise ModelError("fusion needs a retriever")
        if len({len(ex.tokens) for ex in batch}) == 1:
            context = retriever.context(batch)
            return self.forward_batch([ex.tokens for ex in batch], context, tape, rng, noise_free)
        contexts = [retriever.context([ex]) for ex in batch]
        return self._grouped([ex.tokens for ex in batch], contexts, tape, rng, noise_free)

    def _grouped(self, streams, contexts, tape, rng, noise_free) -> DiffArray:
        if len({len(stream) for stream in streams}) == 1 and all(c is None for c in contexts):
            return self.forward_batch(streams, None, tape, rng, noise_free)
        rows = [self.forward_batch([s], c, tape, rng, noise_free) for s, c in zip(streams, contexts)]
        return concat(rows, axis=0)

    def loss(
        self,
        batch: Sequence[Example],
        retriever: Retriever | None = None,
        tape: Tape | None = None,
        rng: RngStream | None = None,
        noise_free: bool = True,
    ) -> DiffArray:
        """Mean cross-entropy over the batch."""
        logits = self.batch_logits(batch, retriever, tape, rng, noise_free)
        return cross_entropy(logits, np.array([ex.label for ex in batch]))

    def predict(
        self, examples: Sequence[Example], retriever: Retriever | None = None, batch_size: int = 64
    ) -> np.ndarray:
        """Noise-free logits (n, C) computed without a tape."""
        chunks = [
            self.batch_logits(examples[start : start + batch_size], retriever).values
            for start in range(0, len(examples), batch_size)
        ]
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.config.num_labels))


def _check_shape(x: DiffArray, expected: tuple[int, ...]) -> None:
    if x.shape != expected:
        raise DimensionError("unexpected activation shape", x.shape, expected)
