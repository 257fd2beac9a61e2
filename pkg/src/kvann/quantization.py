"""Product quantization: schema training, encoding and asymmetric distances.

A schema splits the D coordinates into ``m`` contiguous subspaces and keeps
256 centroids per subspace, so every vector encodes to ``m`` bytes. Centroids
are stored as one ``(256, D)`` array: the column block of subspace ``j`` holds
that subspace's codebook.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numba
import numpy as np

from kvann.core import ConfigError, KvannError, Metric

NUM_CENTROIDS = 256
KMEANS_ITERATIONS = 25

_MAGIC = b"KVPQ"
_FORMAT = 1
_NO_PARENT = 0xFFFF


class DegenerateTrainingError(KvannError):
    """The training sample is too small to fill 256 centroids per subspace."""


class StaleSchemaError(KvannError):
    """A code references a schema version that is unknown or unrelated."""


def split_dims(dimension: int, m: int) -> tuple[int, ...]:
    """Equal contiguous blocks; the remainder goes to the first subspaces."""
    if m <= 0 or m > dimension:
        raise ConfigError(f"need 1 <= m <= dimension, got m={m}, dimension={dimension}")
    base, extra = divmod(dimension, m)
    return tuple(base + 1 if j < extra else base for j in range(m))


def default_num_subspaces(dimension: int) -> int:
    """Pruning-grade code size: D/12 bytes (at least 8), snapped to a power of two."""
    target = max(dimension / 12.0, 8.0)
    m = 2 ** int(round(np.log2(target)))
    return max(1, min(m, dimension))


@dataclass(frozen=True)
class PqSchema:
    version: int
    subspace_dims: tuple[int, ...]
    centroids: np.ndarray  # (256, D) float32
    metric: Metric = Metric.EUCLIDEAN
    parent_version: Optional[int] = None
    offsets: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "metric", Metric(self.metric))
        object.__setattr__(self, "subspace_dims", tuple(int(d) for d in self.subspace_dims))
        cents = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if cents.shape != (NUM_CENTROIDS, sum(self.subspace_dims)):
            raise ConfigError(f"centroid array has shape {cents.shape}")
        if not 0 <= self.version < _NO_PARENT:
            raise ConfigError("schema version must fit in 16 bits")
        object.__setattr__(self, "centroids", cents)
        object.__setattr__(self, "offsets", np.concatenate([[0], np.cumsum(self.subspace_dims)]))

    @property
    def m(self) -> int:
        return len(self.subspace_dims)

    @property
    def dimension(self) -> int:
        return int(self.offsets[-1])

    def codebook(self, j: int) -> np.ndarray:
        """The 256 centroids of subspace ``j``."""
        return self.centroids[:, self.offsets[j]:self.offsets[j + 1]]

    def to_bytes(self) -> bytes:
        parent = _NO_PARENT if self.parent_version is None else self.parent_version
        metric_code = list(Metric).index(self.metric)
        head = struct.pack(
            "<4sHHBHHI", _MAGIC, _FORMAT, self.version, metric_code, parent, self.m, self.dimension
        )
        dims = struct.pack(f"<{self.m}H", *self.subspace_dims)
        return head + dims + self.centroids.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PqSchema":
        head = struct.calcsize("<4sHHBHHI")
        if len(blob) < head:
            raise ConfigError("truncated schema blob")
        magic, fmt, version, metric_code, parent, m, dim = struct.unpack_from("<4sHHBHHI", blob)
        if magic != _MAGIC or fmt != _FORMAT:
            raise ConfigError("not a PQ schema blob")
        dims = struct.unpack_from(f"<{m}H", blob, head)
        start = head + 2 * m
        expected = start + NUM_CENTROIDS * dim * 4
        if len(blob) != expected:
            raise ConfigError(f"schema blob has {len(blob)} bytes, expected {expected}")
        cents = np.frombuffer(blob, dtype="<f4", offset=start).reshape(NUM_CENTROIDS, dim)
        return cls(
            version=version,
            subspace_dims=dims,
            centroids=cents.astype(np.float32),
            metric=list(Metric)[metric_code],
            parent_version=None if parent == _NO_PARENT else parent,
        )


@dataclass(frozen=True)
class QuantizedVector:
    codes: bytes
    schema_version: int


@dataclass(frozen=True)
class QueryDistanceTable:
    """Per-subspace partial distances from one query to all 256 centroids."""

    table: np.ndarray  # (m, 256) float32
    schema_version: int
    offset: float = 0.0

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        codes = np.ascontiguousarray(codes, dtype=np.uint8)
        if codes.ndim == 1:
            codes = codes.reshape(1, -1)
        return pq_lookup(self.table, codes, np.float32(self.offset))


# ---------------------------------------------------------------------------
# k-means


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    x2 = np.einsum("ij,ij->i", X, X)[:, None]
    c2 = np.einsum("ij,ij->i", C, C)[None, :]
    return np.maximum(x2 - 2.0 * (X @ C.T) + c2, 0.0)


def _assign(X: np.ndarray, C: np.ndarray, chunk: int = 16384) -> tuple[np.ndarray, np.ndarray]:
    labels = np.empty(len(X), dtype=np.int64)
    best = np.empty(len(X), dtype=np.float64)
    c2 = np.einsum("ij,ij->i", C, C)
    for start in range(0, len(X), chunk):
        part = X[start:start + chunk]
        # ||x||^2 is constant per row; leave it out of the argmin
        scores = c2[None, :] - 2.0 * (part @ C.T)
        idx = np.argmin(scores, axis=1)
        labels[start:start + chunk] = idx
        x2 = np.einsum("ij,ij->i", part, part)
        best[start:start + chunk] = np.maximum(scores[np.arange(len(part)), idx] + x2, 0.0)
    return labels, best


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    centers[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[i] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centers[i:i + 1])[:, 0])
    return centers


def kmeans(
    X: np.ndarray,
    k: int,
    iterations: int = KMEANS_ITERATIONS,
    init: Optional[np.ndarray] = None,
    seed: int = 0,
) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding (or ``init``).

    Empty clusters are re-seeded from the points farthest from their centroid.
    """
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    C = np.array(init, dtype=np.float64) if init is not None else _kmeans_pp(X, k, rng)
    prev = None
    for _ in range(iterations):
        labels, d2 = _assign(X, C)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(C)
        for col in range(X.shape[1]):
            sums[:, col] = np.bincount(labels, weights=X[:, col], minlength=k)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if len(empty):
            far = np.argsort(-d2, kind="stable")[: len(empty)]
            C[empty] = X[far]
        if prev is not None and len(empty) == 0 and np.array_equal(prev, labels):
            break
        prev = labels
    return C


def train_schema(
    sample: Union[np.ndarray, Sequence[np.ndarray]],
    m: int,
    version: int,
    warm_start: Optional[PqSchema] = None,
    metric: Metric | str = Metric.EUCLIDEAN,
    iterations: int = KMEANS_ITERATIONS,
    seed: int = 0,
) -> PqSchema:
    """Train a PQ schema by running k-means (k=256) independently per subspace.

    With ``warm_start`` the parent's centroids seed Lloyd's iterations and the
    parent version is recorded, which keeps codes of both versions comparable.
    """
    X = np.asarray(sample, dtype=np.float32)
    if X.ndim != 2 or len(X) == 0:
        raise ConfigError("training sample must be a non-empty 2-d array")
    if len(X) < NUM_CENTROIDS:
        raise DegenerateTrainingError(
            f"need at least {NUM_CENTROIDS} sample vectors, got {len(X)}"
        )
    dims = split_dims(X.shape[1], m)
    if warm_start is not None:
        if warm_start.subspace_dims != dims:
            raise ConfigError("warm start schema has a different subspace layout")
        metric = warm_start.metric
    offsets = np.concatenate([[0], np.cumsum(dims)])
    cents = np.empty((NUM_CENTROIDS, X.shape[1]), dtype=np.float32)
    for j in range(m):
        lo, hi = offsets[j], offsets[j + 1]
        init = None if warm_start is None else warm_start.centroids[:, lo:hi]
        cents[:, lo:hi] = kmeans(X[:, lo:hi], NUM_CENTROIDS, iterations, init=init, seed=seed + j)
    return PqSchema(
        version=version,
        subspace_dims=dims,
        centroids=cents,
        metric=metric,
        parent_version=None if warm_start is None else warm_start.version,
    )


# ---------------------------------------------------------------------------
# encoding


def encode_batch(X: np.ndarray, schema: PqSchema) -> np.ndarray:
    """Codes of shape ``(n, m)``; per subspace the nearest centroid, lower index on ties."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != schema.dimension:
        raise ConfigError(f"expected dimension {schema.dimension}, got {X.shape[1]}")
    codes = np.empty((len(X), schema.m), dtype=np.uint8)
    for j in range(schema.m):
        lo, hi = schema.offsets[j], schema.offsets[j + 1]
        labels, _ = _assign(X[:, lo:hi], schema.centroids[:, lo:hi].astype(np.float64))
        codes[:, j] = labels
    return codes


def encode(v: np.ndarray, schema: PqSchema) -> QuantizedVector:
    return QuantizedVector(encode_batch(v, schema)[0].tobytes(), schema.version)


def decode_batch(codes: np.ndarray, schema: PqSchema) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.ndim == 1:
        codes = codes.reshape(1, -1)
    if codes.shape[1] != schema.m:
        raise ConfigError(f"expected {schema.m} code bytes, got {codes.shape[1]}")
    out = np.empty((len(codes), schema.dimension), dtype=np.float32)
    for j in range(schema.m):
        lo, hi = schema.offsets[j], schema.offsets[j + 1]
        out[:, lo:hi] = schema.centroids[codes[:, j], lo:hi]
    return out


def decode(x: QuantizedVector, schema: PqSchema) -> np.ndarray:
    if x.schema_version != schema.version:
        raise StaleSchemaError(f"code is v{x.schema_version}, schema is v{schema.version}")
    return decode_batch(np.frombuffer(x.codes, dtype=np.uint8), schema)[0]


# ---------------------------------------------------------------------------
# asymmetric distances


@numba.njit(cache=True, nogil=True)
def pq_lookup(table, codes, offset):
    n, m = codes.shape
    out = np.empty(n, dtype=np.float32)
    for i in range(n):
        acc = np.float32(offset)
        for j in range(m):
            acc += table[j, codes[i, j]]
        out[i] = acc
    return out


def query_table(q: np.ndarray, schema: PqSchema) -> QueryDistanceTable:
    """Precompute the query's partial distance to every centroid of every subspace."""
    q = np.asarray(q, dtype=np.float32).reshape(-1)
    if q.shape[0] != schema.dimension:
        raise ConfigError(f"expected dimension {schema.dimension}, got {q.shape[0]}")
    starts = schema.offsets[:-1]
    if schema.metric is Metric.EUCLIDEAN:
        diff = schema.centroids - q[None, :]
        partial = np.add.reduceat(diff * diff, starts, axis=1)
        offset = 0.0
    else:
        partial = -np.add.reduceat(schema.centroids * q[None, :], starts, axis=1)
        offset = 1.0 if schema.metric is Metric.COSINE else 0.0
    table = np.ascontiguousarray(partial.T, dtype=np.float32)
    return QueryDistanceTable(table, schema.version, offset)


class SchemaRegistry:
    """All known schema versions of one index, plus the version new codes use."""

    def __init__(self, schemas: Sequence[PqSchema] = ()) -> None:
        self._schemas: dict[int, PqSchema] = {}
        self.current: Optional[int] = None
        for s in schemas:
            self.add(s)

    def add(self, schema: PqSchema, make_current: bool = True) -> None:
        if self._schemas and schema.subspace_dims != next(iter(self._schemas.values())).subspace_dims:
            raise ConfigError("all schemas of one index must share a subspace layout")
        self._schemas[schema.version] = schema
        if make_current:
            self.current = schema.version

    def __contains__(self, version: int) -> bool:
        return version in self._schemas

    def __len__(self) -> int:
        return len(self._schemas)

    def __iter__(self):
        return iter(sorted(self._schemas.values(), key=lambda s: s.version))

    def get(self, version: int) -> PqSchema:
        try:
            return self._schemas[version]
        except KeyError:
            raise StaleSchemaError(f"unknown schema version {version}") from None

    @property
    def active(self) -> PqSchema:
        if self.current is None:
            raise StaleSchemaError("no quantization schema has been trained yet")
        return self._schemas[self.current]

    @property
    def m(self) -> int:
        return self.active.m

    def related(self, a: int, b: int) -> bool:
        if a == b:
            return a in self._schemas
        sa, sb = self.get(a), self.get(b)
        return sa.parent_version == b or sb.parent_version == a

    def tables(self, q: np.ndarray) -> dict[int, QueryDistanceTable]:
        return {v: query_table(q, s) for v, s in self._schemas.items()}

    def stacked_tables(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Tables for every version stacked as ``(n_versions, m, 256)`` plus offsets."""
        versions = sorted(self._schemas)
        tabs = [query_table(q, self._schemas[v]) for v in versions]
        return (
            np.stack([t.table for t in tabs]),
            np.array([t.offset for t in tabs], dtype=np.float32),
        )

    def version_slots(self) -> dict[int, int]:
        return {v: i for i, v in enumerate(sorted(self._schemas))}

    def stacked_centroids(self) -> np.ndarray:
        return np.stack([self._schemas[v].centroids for v in sorted(self._schemas)])

    def decode(self, codes: np.ndarray, versions: np.ndarray) -> np.ndarray:
        """Reconstruct a batch of codes that may mix schema versions."""
        codes = np.asarray(codes, dtype=np.uint8)
        out = np.empty((len(codes), self.active.dimension), dtype=np.float32)
        for v in np.unique(versions):
            sel = versions == v
            out[sel] = decode_batch(codes[sel], self.get(int(v)))
        return out


def asymmetric_distance(
    q: Union[np.ndarray, QueryDistanceTable],
    x: QuantizedVector,
    schemas: Union[SchemaRegistry, PqSchema],
) -> float:
    """Distance between a full-precision query and a PQ code via table lookups."""
    if isinstance(schemas, PqSchema):
        schemas = SchemaRegistry([schemas])
    schema = schemas.get(x.schema_version)
    if isinstance(q, QueryDistanceTable):
        if q.schema_version != x.schema_version:
            raise StaleSchemaError("query table and code use different schema versions")
        table = q
    else:
        table = query_table(q, schema)
    codes = np.frombuffer(x.codes, dtype=np.uint8)
    if codes.shape[0] != schema.m:
        raise ConfigError(f"expected {schema.m} code bytes, got {codes.shape[0]}")
    return float(table.lookup(codes)[0])


def cross_schema_distance(
    q: np.ndarray, x: QuantizedVector, in_effect: int, schemas: SchemaRegistry
) -> float:
    """Distance to a code written under a related (parent or child) schema version.

    The code is interpreted with its own version's codebooks; this is only
    meaningful because a warm-started schema stays close to its parent.
    """
    if not schemas.related(x.schema_version, in_effect):
        raise StaleSchemaError(
            f"schema v{x.schema_version} is not related to v{in_effect}"
        )
    return asymmetric_distance(q, x, schemas)
