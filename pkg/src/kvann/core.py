"""Shared domain types, distance functions and index configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np


class KvannError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(KvannError, ValueError):
    """Invalid configuration or mismatched vector dimensions."""


class NotFoundError(KvannError, KeyError):
    """Operation referenced an id that is not live."""


class ContractError(KvannError):
    """A caller violated an operation's precondition."""


class Metric(str, Enum):
    EUCLIDEAN = "euclidean"
    INNER_PRODUCT = "inner_product"
    COSINE = "cosine"


@dataclass(frozen=True)
class IndexConfig:
    """Graph index parameters.

    ``degree_slack`` lets an out-list grow to ``ceil(degree_slack * degree_bound)``
    entries before a back-edge triggers a prune. ``prune_rule`` selects the
    exclusion test used by robust prune (see ``kvann.graph.prune``).
    """

    dimension: int
    metric: Metric = Metric.EUCLIDEAN
    degree_bound: int = 32
    build_list_size: int = 100
    alpha: float = 1.2
    degree_slack: float = 1.3
    minibatch_max: int = 100
    replace_closest: int = 3
    prune_rule: str = "printed"

    def __post_init__(self) -> None:
        object.__setattr__(self, "metric", Metric(self.metric))
        if self.dimension <= 0:
            raise ConfigError(f"dimension must be positive, got {self.dimension}")
        if self.degree_bound <= 0:
            raise ConfigError("degree_bound must be positive")
        if self.build_list_size < self.degree_bound:
            raise ConfigError("build_list_size must be >= degree_bound")
        if self.alpha < 1.0:
            raise ConfigError("alpha must be >= 1.0")
        if self.degree_slack < 1.0:
            raise ConfigError("degree_slack must be >= 1.0")
        if self.minibatch_max <= 0 or self.replace_closest <= 0:
            raise ConfigError("minibatch_max and replace_closest must be positive")
        if self.prune_rule not in ("printed", "rng"):
            raise ConfigError(f"unknown prune_rule {self.prune_rule!r}")

    @property
    def max_degree(self) -> int:
        # guard against 1.3 * 32 = 41.6000000001 style float noise
        return math.ceil(round(self.degree_slack * self.degree_bound, 9))


@dataclass
class VectorRecord:
    """One document: id, full-precision embedding, optional shard key and label bitmap."""

    id: int
    embedding: np.ndarray
    shard_key: Optional[bytes] = None
    labels: int = 0

    def __post_init__(self) -> None:
        if not 0 <= int(self.id) < 2**64:
            raise ConfigError(f"vector id {self.id} outside the u64 range")
        self.id = int(self.id)
        self.embedding = np.asarray(self.embedding, dtype=np.float32)


@dataclass(frozen=True)
class LabelFilter:
    """Predicate over label bitmaps.

    ``mode`` is ``"any"`` (shares a bit with ``bits``), ``"all"`` (contains every
    bit) or ``"equal"`` (bitmap identical to ``bits``).
    """

    bits: int
    mode: str = "any"

    def matches(self, labels: int) -> bool:
        if self.mode == "any":
            return bool(labels & self.bits)
        if self.mode == "all":
            return labels & self.bits == self.bits
        if self.mode == "equal":
            return labels == self.bits
        raise ConfigError(f"unknown filter mode {self.mode!r}")


class IdSet:
    """Sorted set of ids with vectorized membership; serves as a filter bitmap."""

    def __init__(self, ids=()) -> None:
        self.ids = np.unique(np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids,
                                        dtype=np.uint64))

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def __contains__(self, doc_id: int) -> bool:
        return bool(self.contains(np.array([doc_id], dtype=np.uint64))[0])

    def contains(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.uint64)
        if len(self.ids) == 0:
            return np.zeros(ids.shape, dtype=bool)
        pos = np.searchsorted(self.ids, ids)
        pos = np.minimum(pos, len(self.ids) - 1)
        return self.ids[pos] == ids


@dataclass
class Counters:
    """Read and compute counters accumulated by graph and query operations."""

    quant_reads: int = 0
    adj_reads: int = 0
    fullprec_reads: int = 0
    hops: int = 0
    cmps: int = 0
    pages: int = 0

    def add(self, other: "Counters") -> "Counters":
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self

    def as_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


def prepare_embedding(v, dimension: int, metric: Metric) -> np.ndarray:
    """Validate an embedding at ingest and normalize it for the cosine metric."""
    arr = np.asarray(v, dtype=np.float32).reshape(-1)
    if arr.shape[0] != dimension:
        raise ConfigError(f"expected dimension {dimension}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("embedding contains NaN or Inf")
    if Metric(metric) is Metric.COSINE:
        norm = float(np.linalg.norm(arr.astype(np.float64)))
        if norm == 0.0:
            raise ConfigError("cannot normalize a zero vector for the cosine metric")
        arr = (arr / norm).astype(np.float32)
    return arr


def distance(a, b, metric: Metric | str = Metric.EUCLIDEAN) -> float:
    """Distance between two embeddings.

    Euclidean returns the squared L2 distance, inner product the negated dot
    product, cosine ``1 - cos(a, b)``.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise ConfigError(f"dimension mismatch: {a.shape} vs {b.shape}")
    metric = Metric(metric)
    if metric is Metric.EUCLIDEAN:
        d = a - b
        return float(np.float32(np.dot(d, d)))
    if metric is Metric.INNER_PRODUCT:
        return float(np.float32(-np.dot(a, b)))
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 1.0
    return float(np.float32(1.0 - np.dot(a, b) / (na * nb)))


def distances(q: np.ndarray, X: np.ndarray, metric: Metric | str = Metric.EUCLIDEAN) -> np.ndarray:
    """Vectorized ``distance`` from one query to every row of ``X``.

    Cosine assumes both sides were normalized by ``prepare_embedding``.
    """
    q = np.asarray(q, dtype=np.float32)
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2 or X.shape[1] != q.shape[0]:
        raise ConfigError(f"dimension mismatch: query {q.shape}, data {X.shape}")
    metric = Metric(metric)
    if metric is Metric.EUCLIDEAN:
        diff = X - q
        return np.einsum("ij,ij->i", diff, diff).astype(np.float32)
    dots = X @ q
    if metric is Metric.INNER_PRODUCT:
        return (-dots).astype(np.float32)
    return (1.0 - dots).astype(np.float32)


def user_distance(d: float, metric: Metric | str) -> float:
    """Convert an internal distance to the value reported to users."""
    if Metric(metric) is Metric.EUCLIDEAN:
        return math.sqrt(max(d, 0.0))
    return d


def rank_order(ids: np.ndarray, dists: np.ndarray) -> np.ndarray:
    """Indices sorting by ascending distance, ties toward the lower id."""
    return np.lexsort((np.asarray(ids, dtype=np.uint64), np.asarray(dists)))
