"""Exact top-k retrieval over an immutable, persisted embedding store."""
from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
import logging
from pathlib import Path
import struct
import time
from typing import Any, Protocol

import numpy as np

from .const import STORE_MAGIC, STORE_NO_PAYLOAD, STORE_VERSION
from .exceptions import (
    DimensionError,
    ParameterError,
    RetrievalError,
    StoreBuildError,
    StoreFormatError,
)

_LOGGER = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sIIQ")
# Guards against absurd headers before any allocation happens.
_MAX_DIM = 1 << 16


class Metric(StrEnum):
    """Similarity metric used to rank store entries."""

    L2 = "L2"
    INNER_PRODUCT = "InnerProduct"

    @classmethod
    def parse(cls, text: str) -> Metric:
        """Parse a metric name, accepting ``IP`` as an alias."""
        if text.strip().upper() == "IP":
            return cls.INNER_PRODUCT
        return cls(text.strip())


class QueryMode(StrEnum):
    """What the retrieval query is built from."""

    INPUT_TEXT = "InputText"
    HIDDEN_STATE = "HiddenState"


@dataclass(frozen=True)
class StoreEntry:
    """One (id, vector, optional label payload) record."""

    id: int
    vector: Sequence[float] | np.ndarray
    payload: int | None = None


@dataclass(frozen=True, eq=False)
class RetrievalHit:
    """A retrieved entry with its metric-dependent score."""

    id: int
    score: float
    vector: np.ndarray
    payload: int | None = None


@dataclass(frozen=True)
class RetrievalResult:
    """Hits sorted best-first; ``clamped`` is set when fewer than k were available."""

    hits: tuple[RetrievalHit, ...]
    clamped: bool = False

    def __len__(self) -> int:
        return len(self.hits)

    def __iter__(self):
        return iter(self.hits)

    def __getitem__(self, index: int) -> RetrievalHit:
        return self.hits[index]

    @property
    def ids(self) -> list[int]:
        return [hit.id for hit in self.hits]

    @property
    def scores(self) -> list[float]:
        return [hit.score for hit in self.hits]

    def vectors(self) -> np.ndarray:
        """Stack hit vectors into a (k, D) array."""
        return np.stack([hit.vector for hit in self.hits])


@dataclass(frozen=True, eq=False)
class VectorStore:
    """Read-only key-value store of D-dimensional vectors."""

    dim: int
    ids: np.ndarray
    vectors: np.ndarray
    payloads: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @classmethod
    def empty(cls, dim: int) -> VectorStore:
        """Return a store with no entries."""
        return _freeze(dim, np.zeros(0, np.int64), np.zeros((0, dim)), np.zeros(0, np.int64))

    def entries(self) -> list[StoreEntry]:
        """Return every entry in storage order."""
        return [
            StoreEntry(int(i), self.vectors[row].copy(), None if p == STORE_NO_PAYLOAD else int(p))
            for row, (i, p) in enumerate(zip(self.ids, self.payloads))
        ]

    def row_of(self, entry_id: int) -> int:
        """Return the storage row of ``entry_id``."""
        rows = np.flatnonzero(self.ids == entry_id)
        if rows.size == 0:
            raise RetrievalError(f"id {entry_id} not in store")
        return int(rows[0])


def _freeze(dim: int, ids: np.ndarray, vectors: np.ndarray, payloads: np.ndarray) -> VectorStore:
    for array in (ids, vectors, payloads):
        array.setflags(write=False)
    return VectorStore(dim, ids, vectors, payloads)


def build_store(entries: Iterable[StoreEntry]) -> VectorStore:
    """Validate entries and freeze them into a store."""
    entries = list(entries)
    if not entries:
        raise StoreBuildError("cannot build a store from zero entries")
    vectors = [np.asarray(entry.vector, dtype=np.float64) for entry in entries]
    dim = vectors[0].shape[0] if vectors[0].ndim == 1 else -1
    if dim < 1:
        raise StoreBuildError("store vectors must be non-empty 1-D arrays")
    for entry, vector in zip(entries, vectors):
        if vector.shape != (dim,):
            raise StoreBuildError(f"entry {entry.id} has dimension {vector.shape}, expected ({dim},)")
        if entry.id < 0:
            raise StoreBuildError(f"entry ids must be non-negative, got {entry.id}")
        if entry.payload is not None and entry.payload < 0:
            raise StoreBuildError(f"entry {entry.id} payload must be non-negative")
    ids = np.array([entry.id for entry in entries], dtype=np.int64)
    unique, counts = np.unique(ids, return_counts=True)
    if np.any(counts > 1):
        raise StoreBuildError(f"duplicate ids: {unique[counts > 1].tolist()}")
    payloads = np.array(
        [STORE_NO_PAYLOAD if entry.payload is None else entry.payload for entry in entries],
        dtype=np.int64,
    )
    store = _freeze(dim, ids, np.stack(vectors), payloads)
    _LOGGER.debug("Built vector store with %d entries of dimension %d", len(store), dim)
    return store


def scores(store: VectorStore, query: np.ndarray, metric: Metric) -> np.ndarray:
    """Score every entry against ``query``."""
    if metric is Metric.L2:
        diff = store.vectors - query
        return np.einsum("ij,ij->i", diff, diff)
    return store.vectors @ query


def top_k(
    store: VectorStore,
    query: Sequence[float] | np.ndarray,
    k: int,
    metric: Metric = Metric.L2,
    exclude_id: int | None = None,
) -> RetrievalResult:
    """Exact k best entries; ties go to the smaller id."""
    if len(store) == 0:
        raise RetrievalError("empty store")
    if k < 1:
        raise ParameterError(f"k must be at least 1, got {k}")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (store.dim,):
        raise DimensionError("query does not match store dimension", query.shape, (store.dim,))

    rows = np.arange(len(store))
    if exclude_id is not None:
        rows = rows[store.ids != exclude_id]
    if rows.size == 0:
        raise RetrievalError("empty store after exclusion")
    row_scores = scores(store, query, metric)[rows]
    key = row_scores if metric is Metric.L2 else -row_scores
    order = np.lexsort((store.ids[rows], key))

    clamped = k > rows.size
    if clamped:
        _LOGGER.warning("Requested k=%d but only %d entries are available; returning all", k, rows.size)
    chosen = order[: min(k, rows.size)]
    hits = tuple(
        RetrievalHit(
            id=int(store.ids[rows[i]]),
            score=float(row_scores[i]),
            vector=store.vectors[rows[i]],
            payload=None if store.payloads[rows[i]] == STORE_NO_PAYLOAD else int(store.payloads[rows[i]]),
        )
        for i in chosen
    )
    return RetrievalResult(hits, clamped)


def encode_query(
    source: Sequence[int] | Sequence[float] | np.ndarray,
    mode: QueryMode,
    embedding_table: np.ndarray | None = None,
) -> np.ndarray:
    """Build a D-dimensional query.

    InputText: mean of the token embeddings (toy query encoder).
    HiddenState: the classification-token hidden state, passed through.
    """
    if mode is QueryMode.INPUT_TEXT:
        tokens = np.asarray(source, dtype=np.int64).reshape(-1)
        if tokens.size == 0:
            raise RetrievalError("cannot encode an empty token list")
        if embedding_table is None:
            raise RetrievalError("input-text queries need an embedding table")
        return embedding_table[tokens].mean(axis=0)
    hidden = np.asarray(source, dtype=np.float64)
    if hidden.ndim != 1:
        raise DimensionError("hidden-state query must be a vector", hidden.shape)
    if embedding_table is not None and hidden.shape[0] != embedding_table.shape[1]:
        raise DimensionError("hidden-state query does not match dimension", hidden.shape, (embedding_table.shape[1],))
    return hidden.copy()


def save_store(store: VectorStore, path: str | Path) -> None:
    """Write the store in the little-endian RFVS format."""
    records = np.zeros(len(store), dtype=_record_dtype(store.dim))
    records["id"] = store.ids
    records["payload"] = store.payloads
    records["vector"] = store.vectors
    path = Path(path)
    with path.open("wb") as handle:
        handle.write(_HEADER.pack(STORE_MAGIC, STORE_VERSION, store.dim, len(store)))
        handle.write(records.tobytes())
    _LOGGER.info("Saved %d store entries to %s", len(store), path)


def load_store(path: str | Path) -> VectorStore:
    """Read an RFVS file, validating every header field."""
    data = Path(path).read_bytes()
    return decode_store(data)


def decode_store(data: bytes) -> VectorStore:
    """Decode an in-memory RFVS buffer."""
    if len(data) < _HEADER.size:
        raise StoreFormatError("truncated header", len(data))
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != STORE_MAGIC:
        raise StoreFormatError(f"bad magic {magic!r}", 0)
    if version != STORE_VERSION:
        raise StoreFormatError(f"unsupported version {version}", 4)
    if dim < 1 or dim > _MAX_DIM:
        raise StoreFormatError(f"dimension {dim} out of range", 8)
    record_size = _record_dtype(dim).itemsize
    available = (len(data) - _HEADER.size) // record_size
    if available < count:
        raise StoreFormatError(
            f"truncated: header announces {count} entries, file holds {available}",
            _HEADER.size + available * record_size,
        )
    end = _HEADER.size + count * record_size
    if end != len(data):
        raise StoreFormatError("trailing bytes after last entry", end)
    if count == 0:
        return VectorStore.empty(dim)
    records = np.frombuffer(data, dtype=_record_dtype(dim), count=count, offset=_HEADER.size)
    if np.any(records["id"] > np.iinfo(np.int64).max):
        raise StoreFormatError("entry id exceeds the signed 64-bit range", _HEADER.size)
    return _freeze(
        dim,
        records["id"].astype(np.int64),
        records["vector"].astype(np.float64),
        records["payload"].astype(np.int64),
    )


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("payload", "<i8"), ("vector", "<f8", (dim,))])


class RetrievalQuery(Protocol):
    """Anything with an id and body tokens can be used as a retrieval query."""

    @property
    def id(self) -> int: ...

    @property
    def body(self) -> tuple[int, ...]: ...


@dataclass
class RetrievalContext:
    """Retrieved hit vectors for one batch of examples.

    In InputText mode (or with explicitly supplied hits) the same (B, k, D)
    block is reused at every fusion site. In HiddenState mode every call to
    ``hits_for`` runs a fresh search from the current classification-token
    hidden states; the time spent there is accumulated for latency reports.
    """

    retriever: Retriever | None
    exclude_ids: tuple[int | None, ...] = ()
    static_hits: np.ndarray | None = None
    retrieve_seconds: float = 0.0
    searches: int = 0

    @classmethod
    def static(cls, hits: np.ndarray | Sequence[RetrievalHit] | RetrievalResult) -> RetrievalContext:
        """Wrap fixed hits: (k, D) for one example or (B, k, D) for a batch."""
        if isinstance(hits, RetrievalResult):
            hits = hits.vectors()
        elif not isinstance(hits, np.ndarray):
            hits = np.stack([hit.vector for hit in hits])
        hits = np.asarray(hits, dtype=np.float64)
        if hits.ndim == 2:
            hits = hits[None]
        if hits.ndim != 3:
            raise DimensionError("hits must be (k, D) or (B, k, D)", hits.shape)
        return cls(retriever=None, static_hits=hits)

    def hits_for(self, site: Any, cls_hidden: np.ndarray) -> np.ndarray:
        """Return (B, k, D) hit vectors for a fusion site."""
        if self.static_hits is not None:
            return self.static_hits
        if self.retriever is None:
            raise RetrievalError("retrieval context has neither hits nor a retriever")
        started = time.perf_counter()
        hits = self.retriever.search_batch(cls_hidden, self.exclude_ids)
        self.retrieve_seconds += time.perf_counter() - started
        self.searches += 1
        _LOGGER.debug("Hidden-state retrieval for %s over %d queries", site, cls_hidden.shape[0])
        return hits


class Retriever:
    """Bundles a store with its query encoder and retrieval settings."""

    def __init__(
        self,
        store: VectorStore,
        k: int,
        metric: Metric = Metric.L2,
        query_mode: QueryMode = QueryMode.INPUT_TEXT,
        embedding_table: np.ndarray | None = None,
        exclude_self: bool = True,
        documents: Mapping[int, Sequence[int]] | None = None,
    ) -> None:
        """Initialize the retriever and check the store can serve k hits."""
        if k < 1:
            raise ParameterError(f"k must be at least 1, got {k}")
        needed = k + (1 if exclude_self else 0)
        if len(store) < needed:
            raise RetrievalError(f"store holds {len(store)} entries; k={k} needs at least {needed}")
        if embedding_table is not None and embedding_table.shape[1] != store.dim:
            raise DimensionError("embedding table does not match store dimension", embedding_table.shape, (store.dim,))
        self.store = store
        self.k = k
        self.metric = metric
        self.query_mode = query_mode
        self.embedding_table = embedding_table
        self.exclude_self = exclude_self
        self.documents = dict(documents) if documents is not None else {}

    def _exclusion(self, query: RetrievalQuery) -> int | None:
        return query.id if self.exclude_self else None

    def encode(self, query: RetrievalQuery) -> np.ndarray:
        """Encode a query example's body with the input-text encoder."""
        return encode_query(query.body, QueryMode.INPUT_TEXT, self.embedding_table)

    def search(self, vector: np.ndarray, exclude_id: int | None = None) -> RetrievalResult:
        """Top-k search for one query vector."""
        return top_k(self.store, vector, self.k, self.metric, exclude_id)

    def search_batch(self, queries: np.ndarray, exclude_ids: Sequence[int | None] = ()) -> np.ndarray:
        """Top-k hit vectors for each query row, shaped (B, k, D)."""
        queries = np.asarray(queries, dtype=np.float64)
        if not exclude_ids:
            exclude_ids = (None,) * queries.shape[0]
        return np.stack([self.search(q, e).vectors() for q, e in zip(queries, exclude_ids)])

    def retrieve(self, query: RetrievalQuery) -> RetrievalResult:
        """Input-text retrieval for one example."""
        return self.search(self.encode(query), self._exclusion(query))

    def context(
        self,
        queries: Sequence[RetrievalQuery],
        query_mode: QueryMode | None = None,
    ) -> RetrievalContext:
        """Build the retrieval context for a batch."""
        mode = query_mode or self.query_mode
        exclude_ids = tuple(self._exclusion(query) for query in queries)
        if mode is QueryMode.HIDDEN_STATE:
            return RetrievalContext(retriever=self, exclude_ids=exclude_ids)
        started = time.perf_counter()
        hits = np.stack([self.retrieve(query).vectors() for query in queries])
        context = RetrievalContext(retriever=self, exclude_ids=exclude_ids, static_hits=hits)
        context.retrieve_seconds = time.perf_counter() - started
        context.searches = 1
        return context

    def neighbor_documents(self, query: RetrievalQuery) -> list[tuple[int, ...]]:
        """Token sequences of the best hits (most similar first) for concatenation."""
        result = self.retrieve(query)
        missing = [hit.id for hit in result if hit.id not in self.documents]
        if missing:
            raise RetrievalError(f"no documents registered for ids {missing}")
        return [tuple(self.documents[hit.id]) for hit in result]


@dataclass
class StoreStats:
    """Summary used when logging a built store."""

    count: int
    dim: int
    labels: dict[int, int] = field(default_factory=dict)

    @classmethod
    def of(cls, store: VectorStore) -> StoreStats:
        labels, counts = np.unique(store.payloads[store.payloads != STORE_NO_PAYLOAD], return_counts=True)
        return cls(len(store), store.dim, {int(a): int(b) for a, b in zip(labels, counts)})
