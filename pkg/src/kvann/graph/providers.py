"""Provider contracts through which the graph algorithms reach index state.

The graph engine never owns a layout. Quantized vectors, full-precision
vectors, adjacency lists and graph metadata are all read and written through
the providers of a ``ProviderSuite``, and every call carries the suite's
``ExecutionContext`` so one engine can serve many logical indices.

Any provider method may return its result directly or an awaitable that
resolves to it; callers go through ``resolve``.
"""

from __future__ import annotations

import inspect
import json
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, Awaitable, NamedTuple, Optional, Protocol, Sequence, TypeVar, Union

import numpy as np

from kvann.core import ContractError
from kvann.storage import DocumentStore, OrderedStore, Patch, terms

T = TypeVar("T")
MaybeAwaitable = Union[T, Awaitable[T]]


async def resolve(value: MaybeAwaitable[T]) -> T:
    if inspect.isawaitable(value):
        return await value
    return value


@dataclass(frozen=True)
class ExecutionContext:
    """Identifies the logical index a call targets: collection, vector path, shard."""

    collection: str = "default"
    path: str = "/embedding"
    shard: Optional[bytes] = None

    @cached_property
    def path_prefix(self) -> bytes:
        return terms.path_prefix(self.path)

    @cached_property
    def shard_prefix(self) -> Optional[bytes]:
        return None if self.shard is None else terms.shard_prefix(self.shard)


@dataclass
class QuantBatch:
    ids: np.ndarray  # uint64
    codes: np.ndarray  # (n, m) uint8
    versions: np.ndarray  # (n,) uint8
    found: np.ndarray  # bool

    @classmethod
    def empty(cls, m: int = 0) -> "QuantBatch":
        return cls(np.empty(0, np.uint64), np.empty((0, m), np.uint8), np.empty(0, np.uint8),
                   np.empty(0, bool))

    def subset(self, mask: np.ndarray) -> "QuantBatch":
        return QuantBatch(self.ids[mask], self.codes[mask], self.versions[mask], self.found[mask])

    def only_found(self) -> "QuantBatch":
        return self.subset(self.found)


class NeighborOp(Enum):
    APPEND = "append"
    OVERWRITE = "overwrite"
    DELETE = "delete"


@dataclass(frozen=True)
class NeighborPatch:
    op: NeighborOp
    ids: tuple[int, ...] = ()


@dataclass
class GraphMeta:
    start: Optional[int] = None
    live_count: int = 0
    deleted_pending: set[int] = field(default_factory=set)
    cursor: Optional[int] = None
    cycle_pending: set[int] = field(default_factory=set)

    def to_bytes(self) -> bytes:
        return json.dumps({
            "start": self.start,
            "live_count": self.live_count,
            "deleted_pending": sorted(self.deleted_pending),
            "cursor": self.cursor,
            "cycle_pending": sorted(self.cycle_pending),
        }).encode()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GraphMeta":
        d = json.loads(blob)
        return cls(d["start"], d["live_count"], set(d["deleted_pending"]), d["cursor"],
                   set(d["cycle_pending"]))


class QuantProvider(Protocol):
    def get_quantized(self, ctx: ExecutionContext, ids: Sequence[int]) -> MaybeAwaitable[QuantBatch]: ...

    def put_quantized(self, ctx: ExecutionContext, doc_id: int, codes: bytes, version: int) -> MaybeAwaitable[None]: ...

    def delete_quantized(self, ctx: ExecutionContext, doc_id: int) -> MaybeAwaitable[None]: ...

    def scan_quantized(
        self, ctx: ExecutionContext, lo: Optional[int] = None, hi: Optional[int] = None
    ) -> MaybeAwaitable[QuantBatch]: ...


class NeighborProvider(Protocol):
    def get_neighbors(self, ctx: ExecutionContext, doc_id: int) -> MaybeAwaitable[Optional[np.ndarray]]:
        """Out-neighbors of ``doc_id``; None when the vertex has no adjacency term."""
        ...

    def apply_neighbor_patches(
        self, ctx: ExecutionContext, patches: Sequence[tuple[int, NeighborPatch]]
    ) -> MaybeAwaitable[None]:
        """Apply all patches as one atomic batch."""
        ...

    def scan_neighbors(
        self, ctx: ExecutionContext, after: Optional[int], limit: int
    ) -> MaybeAwaitable[list[tuple[int, np.ndarray]]]: ...


class VectorProvider(Protocol):
    def get_vectors(self, ctx: ExecutionContext, ids: Sequence[int]) -> MaybeAwaitable[tuple[np.ndarray, np.ndarray]]: ...


class MetaProvider(Protocol):
    def load_meta(self, ctx: ExecutionContext) -> MaybeAwaitable[GraphMeta]: ...

    def store_meta(self, ctx: ExecutionContext, meta: GraphMeta) -> MaybeAwaitable[None]: ...


class Buffers(NamedTuple):
    """Dense arrays a backend may expose so the engine can run fused traversals."""

    adj: np.ndarray
    deg: np.ndarray
    codes: np.ndarray
    versions: np.ndarray
    alive: np.ndarray
    row_ids: np.ndarray
    stamps: np.ndarray
    row_of: dict
    has_adj: np.ndarray
    cache_marks: np.ndarray


@dataclass
class ProviderSuite:
    quant: QuantProvider
    vectors: VectorProvider
    neighbors: NeighborProvider
    meta: MetaProvider
    context: ExecutionContext = field(default_factory=ExecutionContext)

    def buffers(self) -> Optional[Buffers]:
        fn = getattr(self.quant, "buffers", None)
        if fn is None or self.neighbors is not self.quant:
            return None
        return fn()


# ---------------------------------------------------------------------------
# full-precision vectors from the document store


class DocumentVectors:
    """VectorProvider over a ``DocumentStore``."""

    def __init__(self, docs: DocumentStore) -> None:
        self.docs = docs

    def get_vectors(self, ctx: ExecutionContext, ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        return self.docs.fetch_vectors(ids)


# ---------------------------------------------------------------------------
# ordered key-value store backend


class StoreBackend:
    """Quant, neighbor and meta providers over an ``OrderedStore``.

    Terms are addressed from the call's context, so one instance serves every
    logical index (path, shard) held in the store.
    """

    def __init__(self, store: OrderedStore) -> None:
        self.store = store
        self._meta: dict[ExecutionContext, GraphMeta] = {}

    def get_quantized(self, ctx: ExecutionContext, ids: Sequence[int]) -> QuantBatch:
        ids = np.asarray(ids, dtype=np.uint64).reshape(-1)
        found = np.zeros(len(ids), dtype=bool)
        versions = np.zeros(len(ids), dtype=np.uint8)
        rows: list[Optional[bytes]] = []
        for i, doc_id in enumerate(ids.tolist()):
            hit = self.store.first_with_prefix(
                terms.quant_id_prefix(ctx.path_prefix, ctx.shard_prefix, doc_id))
            if hit is None:
                rows.append(None)
                continue
            *_, version, codes = terms.decode_quant_term(hit[0], ctx.shard_prefix is not None)
            found[i] = True
            versions[i] = version
            rows.append(codes)
        m = next((len(r) for r in rows if r is not None), 0)
        codes = np.zeros((len(ids), m), dtype=np.uint8)
        for i, r in enumerate(rows):
            if r is not None:
                codes[i] = np.frombuffer(r, dtype=np.uint8)
        return QuantBatch(ids, codes, versions, found)

    def _quant_keys(self, ctx: ExecutionContext, doc_id: int) -> list[bytes]:
        prefix = terms.quant_id_prefix(ctx.path_prefix, ctx.shard_prefix, doc_id)
        return [k for k, _ in self.store.prefix_seek(prefix, count=False)]

    def put_quantized(self, ctx: ExecutionContext, doc_id: int, codes: bytes, version: int) -> None:
        key, value = terms.encode_quant_term(ctx.path_prefix, ctx.shard_prefix, doc_id, codes, version)
        batch = [(old, Patch.delete()) for old in self._quant_keys(ctx, doc_id) if old != key]
        batch.append((key, Patch.overwrite(value)))
        self.store.apply_batch(batch)

    def delete_quantized(self, ctx: ExecutionContext, doc_id: int) -> None:
        old = self._quant_keys(ctx, doc_id)
        if not old:
            raise ContractError(f"no quantized term for id {doc_id}")
        self.store.apply_batch([(k, Patch.delete()) for k in old])

    def scan_quantized(
        self, ctx: ExecutionContext, lo: Optional[int] = None, hi: Optional[int] = None
    ) -> QuantBatch:
        base = terms.quant_range(ctx.path_prefix, ctx.shard_prefix)
        lo_key = base if lo is None else terms.quant_id_prefix(ctx.path_prefix, ctx.shard_prefix, lo)
        hi_key = None if hi is None else terms.quant_id_prefix(ctx.path_prefix, ctx.shard_prefix, hi + 1) \
            if hi + 1 < 2**64 else None
        sharded = ctx.shard_prefix is not None
        ids, vers, rows = [], [], []
        for key, _ in self.store.range_seek(lo_key, hi_key, prefix=base):
            _, _, doc_id, version, codes = terms.decode_quant_term(key, sharded)
            ids.append(doc_id)
            vers.append(version)
            rows.append(np.frombuffer(codes, dtype=np.uint8))
        if not rows:
            return QuantBatch.empty()
        return QuantBatch(np.array(ids, dtype=np.uint64), np.stack(rows),
                          np.array(vers, dtype=np.uint8), np.ones(len(ids), dtype=bool))

    def get_neighbors(self, ctx: ExecutionContext, doc_id: int) -> Optional[np.ndarray]:
        value = self.store.get(terms.encode_adjacency_term(ctx.path_prefix, ctx.shard_prefix, int(doc_id)))
        if value is None:
            return None
        return terms.decode_neighbors(value)

    def apply_neighbor_patches(
        self, ctx: ExecutionContext, patches: Sequence[tuple[int, NeighborPatch]]
    ) -> None:
        batch = []
        for doc_id, patch in patches:
            key = terms.encode_adjacency_term(ctx.path_prefix, ctx.shard_prefix, int(doc_id))
            if patch.op is NeighborOp.APPEND:
                batch.append((key, Patch.append(terms.encode_neighbors(patch.ids))))
            elif patch.op is NeighborOp.OVERWRITE:
                batch.append((key, Patch.overwrite(terms.encode_neighbors(patch.ids))))
            else:
                batch.append((key, Patch.delete()))
        self.store.apply_batch(batch)

    def scan_neighbors(
        self, ctx: ExecutionContext, after: Optional[int], limit: int
    ) -> list[tuple[int, np.ndarray]]:
        base = terms.adjacency_range(ctx.path_prefix, ctx.shard_prefix)
        if after is None:
            lo = base
        elif after + 1 >= 2**64:
            return []
        else:
            lo = terms.encode_adjacency_term(ctx.path_prefix, ctx.shard_prefix, after + 1)
        out = []
        sharded = ctx.shard_prefix is not None
        for key, value in self.store.range_seek(lo, None, prefix=base, limit=limit):
            out.append((terms.decode_adjacency_term(key, sharded)[2], terms.decode_neighbors(value)))
        return out

    def load_meta(self, ctx: ExecutionContext) -> GraphMeta:
        meta = self._meta.get(ctx)
        if meta is None:
            blob = self.store.get(terms.meta_key(ctx.path_prefix, ctx.shard_prefix))
            meta = GraphMeta() if blob is None else GraphMeta.from_bytes(blob)
            self._meta[ctx] = meta
        return meta

    def store_meta(self, ctx: ExecutionContext, meta: GraphMeta) -> None:
        self._meta[ctx] = meta
        self.store.put(terms.meta_key(ctx.path_prefix, ctx.shard_prefix), meta.to_bytes())

    def drop_cached_meta(self) -> None:
        self._meta.clear()


# ---------------------------------------------------------------------------
# dense in-memory backend


class MemoryBackend:
    """Quant, neighbor and meta providers over growable numpy buffers.

    Serves a single logical index. Vertices get a dense row on first write;
    rows are never reused, which matches ids never being reused.
    """

    def __init__(self, m: int, max_degree: int, capacity: int = 1024) -> None:
        self.m = m
        self.max_degree = max_degree
        self._row_of: dict[int, int] = {}
        self._n = 0
        self._stamp = 0
        self._alloc(capacity)
        self.meta = GraphMeta()

    def _alloc(self, capacity: int) -> None:
        old_n = self._n
        def grow(arr, shape, dtype, fill=0):
            new = np.full(shape, fill, dtype=dtype)
            if arr is not None:
                new[:old_n] = arr[:old_n]
            return new
        get = lambda name: getattr(self, name, None)
        self.adj = grow(get("adj"), (capacity, self.max_degree), np.int64)
        self.deg = grow(get("deg"), capacity, np.int32)
        self.has_adj = grow(get("has_adj"), capacity, bool)
        self.codes = grow(get("codes"), (capacity, self.m), np.uint8)
        self.versions = grow(get("versions"), capacity, np.uint8)
        self.alive = grow(get("alive"), capacity, bool)
        self.row_ids = grow(get("row_ids"), capacity, np.uint64)
        self.stamps = grow(get("stamps"), capacity, np.int64, fill=-1)
        self.cache_marks = grow(get("cache_marks"), capacity, np.int64, fill=-1)
        self.capacity = capacity

    def _row(self, doc_id: int, create: bool = False) -> Optional[int]:
        row = self._row_of.get(doc_id)
        if row is None and create:
            if self._n == self.capacity:
                self._alloc(2 * self.capacity)
            row = self._n
            self._n += 1
            self._row_of[doc_id] = row
            self.row_ids[row] = doc_id
        return row

    def next_stamp(self) -> int:
        """Fresh marker value for the shared visited array."""
        self._stamp += 1
        return self._stamp

    def buffers(self) -> Buffers:
        n = self._n
        return Buffers(self.adj[:n], self.deg[:n], self.codes[:n], self.versions[:n],
                       self.alive[:n], self.row_ids[:n], self.stamps[:n], self._row_of,
                       self.has_adj[:n], self.cache_marks[:n])

    def get_quantized(self, ctx: ExecutionContext, ids: Sequence[int]) -> QuantBatch:
        ids = np.asarray(ids, dtype=np.uint64).reshape(-1)
        rows = np.array([self._row_of.get(i, -1) for i in ids.tolist()], dtype=np.int64)
        found = rows >= 0
        found[found] = self.alive[rows[found]]
        safe = np.where(found, rows, 0)
        return QuantBatch(ids, self.codes[safe], self.versions[safe], found)

    def put_quantized(self, ctx: ExecutionContext, doc_id: int, codes: bytes, version: int) -> None:
        row = self._row(int(doc_id), create=True)
        self.codes[row] = np.frombuffer(codes, dtype=np.uint8)
        self.versions[row] = version
        self.alive[row] = True

    def delete_quantized(self, ctx: ExecutionContext, doc_id: int) -> None:
        row = self._row(int(doc_id))
        if row is None or not self.alive[row]:
            raise ContractError(f"no quantized term for id {doc_id}")
        self.alive[row] = False

    def scan_quantized(
        self, ctx: ExecutionContext, lo: Optional[int] = None, hi: Optional[int] = None
    ) -> QuantBatch:
        n = self._n
        ids = self.row_ids[:n]
        sel = self.alive[:n].copy()
        if lo is not None:
            sel &= ids >= np.uint64(lo)
        if hi is not None:
            sel &= ids <= np.uint64(hi)
        rows = np.flatnonzero(sel)
        rows = rows[np.argsort(ids[rows], kind="stable")]
        return QuantBatch(ids[rows], self.codes[rows], self.versions[rows], np.ones(len(rows), bool))

    def get_neighbors(self, ctx: ExecutionContext, doc_id: int) -> Optional[np.ndarray]:
        row = self._row_of.get(int(doc_id))
        if row is None or not self.has_adj[row]:
            return None
        return self.row_ids[self.adj[row, :self.deg[row]]]

    def apply_neighbor_patches(
        self, ctx: ExecutionContext, patches: Sequence[tuple[int, NeighborPatch]]
    ) -> None:
        staged: dict[int, Optional[list[int]]] = {}
        for doc_id, patch in patches:
            doc_id = int(doc_id)
            if doc_id not in staged:
                cur = self.get_neighbors(ctx, doc_id)
                staged[doc_id] = None if cur is None else cur.tolist()
            if patch.op is NeighborOp.DELETE:
                if staged[doc_id] is None:
                    raise ContractError(f"delete of missing adjacency list {doc_id}")
                staged[doc_id] = None
            elif patch.op is NeighborOp.OVERWRITE:
                staged[doc_id] = list(patch.ids)
            else:
                cur = staged[doc_id] or []
                if set(cur).intersection(patch.ids) or len(set(patch.ids)) != len(patch.ids):
                    raise ContractError(f"duplicate append to adjacency list {doc_id}")
                staged[doc_id] = cur + list(patch.ids)
        for doc_id, ids in staged.items():
            if ids is not None and len(ids) > self.max_degree:
                raise ContractError(f"adjacency list {doc_id} exceeds {self.max_degree} entries")
        for doc_id, ids in staged.items():
            if ids is None:
                row = self._row_of.get(doc_id)
                if row is not None:
                    self.has_adj[row] = False
                    self.deg[row] = 0
                continue
            row = self._row(doc_id, create=True)
            nbr_rows = [self._row(int(i), create=True) for i in ids]
            self.adj[row, :len(ids)] = nbr_rows
            self.deg[row] = len(ids)
            self.has_adj[row] = True

    def scan_neighbors(
        self, ctx: ExecutionContext, after: Optional[int], limit: int
    ) -> list[tuple[int, np.ndarray]]:
        n = self._n
        ids = self.row_ids[:n]
        sel = self.has_adj[:n].copy()
        if after is not None:
            sel &= ids > np.uint64(after)
        rows = np.flatnonzero(sel)
        rows = rows[np.argsort(ids[rows], kind="stable")][:limit]
        return [(int(self.row_ids[r]), self.row_ids[self.adj[r, :self.deg[r]]]) for r in rows]

    def load_meta(self, ctx: ExecutionContext) -> GraphMeta:
        return self.meta

    def store_meta(self, ctx: ExecutionContext, meta: GraphMeta) -> None:
        self.meta = meta

    def live_ids(self) -> np.ndarray:
        n = self._n
        return np.sort(self.row_ids[:n][self.alive[:n]])
