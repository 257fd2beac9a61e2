"""Graph index algorithms expressed against provider interfaces.

Navigation runs in quantized space: every distance from a query to a vertex is
an asymmetric PQ distance, and pruning compares decoded PQ vectors. Ties are
always broken toward the lower id. When a suite exposes dense buffers the
traversal runs in a compiled kernel; otherwise it is driven through provider
calls. Both paths share their distance and prune routines and produce the same
graph and the same counters.
"""

from __future__ import annotations

import asyncio
import heapq
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from kvann.core import ConfigError, ContractError, Counters, IdSet, IndexConfig, NotFoundError
from kvann.graph import _kernels as K
from kvann.graph.providers import (
    GraphMeta,
    NeighborOp,
    NeighborPatch,
    ProviderSuite,
    QuantBatch,
    resolve,
)
from kvann.quantization import SchemaRegistry

_EMPTY_IDS = np.empty(0, dtype=np.uint64)
_NO_MATCH = np.empty(0, dtype=np.bool_)


@dataclass
class QueryTables:
    """Asymmetric distance tables of one query for every known schema version."""

    tables: np.ndarray  # (n_versions, m, 256)
    offsets: np.ndarray  # (n_versions,)
    lut: np.ndarray  # version byte -> slot

    @classmethod
    def build(cls, registry: SchemaRegistry, q: np.ndarray) -> "QueryTables":
        tables, offsets = registry.stacked_tables(q)
        lut = np.zeros(256, dtype=np.int64)
        for version, slot in registry.version_slots().items():
            lut[version] = slot
        return cls(tables, offsets, lut)

    def distances(self, codes: np.ndarray, versions: np.ndarray) -> np.ndarray:
        if len(codes) == 0:
            return np.empty(0, dtype=np.float32)
        return K.pq_lookup_multi(self.tables, self.offsets, np.ascontiguousarray(codes),
                                 self.lut[versions])


class _Frontier:
    """The best list: at most L entries ordered by (key, id)."""

    def __init__(self) -> None:
        self.ids = _EMPTY_IDS
        self.keys = np.empty(0, dtype=np.float32)
        self.dists = np.empty(0, dtype=np.float32)
        self.exp = np.empty(0, dtype=bool)

    def __len__(self) -> int:
        return len(self.ids)

    def set(self, ids, keys, dists, exp) -> None:
        self.ids, self.keys, self.dists, self.exp = ids, keys, dists, exp

    def merge(self, ids, keys, dists, L: int) -> None:
        all_ids = np.concatenate([self.ids, ids])
        all_keys = np.concatenate([self.keys, keys])
        order = np.lexsort((all_ids, all_keys))[:L]
        self.ids = all_ids[order]
        self.keys = all_keys[order]
        self.dists = np.concatenate([self.dists, dists])[order]
        self.exp = np.concatenate([self.exp, np.zeros(len(ids), dtype=bool)])[order]

    def next_unexpanded(self) -> int:
        idx = np.flatnonzero(~self.exp)
        return int(idx[0]) if len(idx) else -1


@dataclass
class Visited:
    """Vertices whose quantized distance was computed during one traversal."""

    ids: np.ndarray
    keys: np.ndarray
    dists: np.ndarray
    codes: np.ndarray
    versions: np.ndarray

    @classmethod
    def empty(cls, m: int) -> "Visited":
        return cls(_EMPTY_IDS, np.empty(0, np.float32), np.empty(0, np.float32),
                   np.empty((0, m), np.uint8), np.empty(0, np.uint8))

    def extend(self, other: "Visited") -> "Visited":
        return Visited(*(np.concatenate([a, b]) for a, b in
                         zip((self.ids, self.keys, self.dists, self.codes, self.versions),
                             (other.ids, other.keys, other.dists, other.codes, other.versions))))


@dataclass
class SearchResult:
    ids: np.ndarray
    dists: np.ndarray
    visited: Visited
    expanded: np.ndarray


class _CodeCache:
    """Codes already read during one operation, looked up by id."""

    def __init__(self, m: int) -> None:
        self.ids = _EMPTY_IDS
        self.codes = np.empty((0, m), dtype=np.uint8)
        self.versions = np.empty(0, dtype=np.uint8)

    def add(self, ids, codes, versions) -> None:
        ids = np.asarray(ids, dtype=np.uint64)
        if len(ids) == 0:
            return
        all_ids = np.concatenate([ids, self.ids])
        uniq, first = np.unique(all_ids, return_index=True)
        self.ids = uniq
        self.codes = np.concatenate([codes, self.codes])[first]
        self.versions = np.concatenate([versions, self.versions])[first]

    def lookup(self, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if len(self.ids) == 0:
            return np.zeros(len(ids), dtype=bool), np.zeros(len(ids), dtype=np.int64)
        pos = np.minimum(np.searchsorted(self.ids, ids), len(self.ids) - 1)
        return self.ids[pos] == ids, pos


@dataclass
class ConsolidationReport:
    scanned: int = 0
    rewritten: int = 0
    edges_removed: int = 0
    cycle_completed: bool = False
    released: list[int] = field(default_factory=list)


class GraphEngine:
    """Insert, delete and search on a bounded-degree proximity graph.

    One engine serves any number of logical indices; each call names its
    target through the ``ProviderSuite`` (and its execution context).

    Args:
        config: graph parameters.
        registry: PQ schemas used for navigation distances and pruning.
        use_kernels: run traversals in the compiled kernel when a suite
            exposes dense buffers.
        concurrent: fan out independent phase-1 work of a mini-batch as
            separate tasks. Results do not depend on it.
    """

    def __init__(
        self,
        config: IndexConfig,
        registry: SchemaRegistry,
        use_kernels: bool = True,
        concurrent: bool = True,
    ) -> None:
        self.config = config
        self.registry = registry
        self.use_kernels = use_kernels
        self.concurrent = concurrent
        self._metric_code = K.METRIC_CODES[config.metric.value]
        self._rule = K.PRINTED_RULE if config.prune_rule == "printed" else K.RNG_RULE
        self._locks: dict = {}
        self._cents_key = None
        self._cents = None

    # ------------------------------------------------------------------ utils

    def _lock(self, suite: ProviderSuite) -> asyncio.Lock:
        key = (id(suite.neighbors), suite.context)
        lock = self._locks.get(key)
        if lock is None:
            lock = self._locks[key] = asyncio.Lock()
        return lock

    def _buffers(self, suite: ProviderSuite):
        return suite.buffers() if self.use_kernels else None

    @property
    def m(self) -> int:
        return self.registry.m

    def _centroids(self) -> tuple[np.ndarray, np.ndarray]:
        key = tuple(self.registry.version_slots())
        if key != self._cents_key:
            self._cents = (self.registry.stacked_centroids(),
                           np.asarray(self.registry.active.offsets, dtype=np.int64))
            self._cents_key = key
        return self._cents

    async def _meta(self, suite: ProviderSuite) -> GraphMeta:
        return await resolve(suite.meta.load_meta(suite.context))

    async def _quant(self, suite: ProviderSuite, ids, counters: Counters) -> QuantBatch:
        ids = np.asarray(ids, dtype=np.uint64)
        counters.quant_reads += len(ids)
        if len(ids) == 0:
            return QuantBatch.empty(self.m)
        return await resolve(suite.quant.get_quantized(suite.context, ids))

    async def _neighbors(self, suite: ProviderSuite, doc_id: int, counters: Counters) -> Optional[np.ndarray]:
        counters.adj_reads += 1
        return await resolve(suite.neighbors.get_neighbors(suite.context, int(doc_id)))

    async def _query_vector(self, suite: ProviderSuite, doc_id: int, counters: Counters) -> np.ndarray:
        counters.fullprec_reads += 1
        mat, found = await resolve(suite.vectors.get_vectors(suite.context, [int(doc_id)]))
        if not found[0]:
            raise NotFoundError(doc_id)
        return mat[0]

    def _keys(self, dists: np.ndarray, ids: np.ndarray, matcher: Optional[IdSet], beta: float) -> np.ndarray:
        if matcher is None:
            return dists
        return K.scale_keys(dists, matcher.contains(ids), np.float32(beta), self._metric_code)

    # -------------------------------------------------------------- traversal

    async def _seed(
        self, suite: ProviderSuite, qt: QueryTables, start: int, matcher: Optional[IdSet],
        beta: float, counters: Counters,
    ) -> Optional[Visited]:
        batch = await self._quant(suite, [start], counters)
        if not batch.found[0]:
            return None
        d = qt.distances(batch.codes, batch.versions)
        counters.cmps += 1
        keys = self._keys(d, batch.ids, matcher, beta)
        return Visited(batch.ids, keys, d, batch.codes, batch.versions)

    async def _traverse(
        self,
        suite: ProviderSuite,
        qt: QueryTables,
        front: _Frontier,
        L: int,
        matcher: Optional[IdSet],
        beta: float,
        visited,
        counters: Counters,
    ) -> tuple[np.ndarray, Visited]:
        """Expand the best list until every entry is expanded.

        ``visited`` is a Python set of ids on the provider path and a
        ``_Stamps`` marker on the kernel path. Returns the expanded ids in
        order and every vertex visited along the way.
        """
        if isinstance(visited, _Stamps):
            return self._traverse_kernel(suite, qt, front, L, matcher, beta, visited, counters)
        ctx = suite.context
        expanded: list[int] = []
        found_parts: list[Visited] = []
        while True:
            pos = front.next_unexpanded()
            if pos < 0:
                break
            front.exp[pos] = True
            p = int(front.ids[pos])
            expanded.append(p)
            counters.hops += 1
            nbrs = await self._neighbors(suite, p, counters)
            if nbrs is None or len(nbrs) == 0:
                continue
            # the whole out-list is fetched in one batch; visited entries are dropped after
            batch = await self._quant(suite, nbrs, counters)
            fresh = np.array([n not in visited for n in nbrs.tolist()], dtype=bool)
            visited.update(nbrs[fresh].tolist())
            keep = fresh & batch.found
            if not keep.any():
                continue
            batch = batch.subset(keep)
            d = qt.distances(batch.codes, batch.versions)
            counters.cmps += len(d)
            keys = self._keys(d, batch.ids, matcher, beta)
            found_parts.append(Visited(batch.ids, keys, d, batch.codes, batch.versions))
            front.merge(batch.ids, keys, d, L)
        vis = Visited.empty(self.m)
        for part in found_parts:
            vis = vis.extend(part)
        return np.array(expanded, dtype=np.uint64), vis

    def _traverse_kernel(self, suite, qt, front, L, matcher, beta, stamps, counters):
        buf = suite.buffers()
        row_of = buf.row_of
        seed_rows = np.array([row_of[int(i)] for i in front.ids.tolist()], dtype=np.int64)
        match = matcher.contains(buf.row_ids) if matcher is not None else _NO_MATCH
        marks = stamps.array(len(buf.row_ids))
        (b_row, b_key, b_dist, b_exp, exp_rows, v_row, v_key, v_dist, reads) = K.traverse(
            buf.adj, buf.deg, buf.codes, buf.versions, qt.lut, buf.alive, buf.row_ids,
            qt.tables, qt.offsets, seed_rows, front.keys, front.dists, front.exp, L, match,
            np.float32(beta), self._metric_code, marks, stamps.stamp,
        )
        front.set(buf.row_ids[b_row], b_key, b_dist, b_exp)
        counters.hops += len(exp_rows)
        counters.adj_reads += len(exp_rows)
        counters.quant_reads += int(reads)
        counters.cmps += len(v_row)
        vis = Visited(buf.row_ids[v_row], v_key, v_dist, buf.codes[v_row], buf.versions[v_row])
        return buf.row_ids[exp_rows], vis

    def _visited_marker(self, suite: ProviderSuite, persistent: bool = False):
        buf = self._buffers(suite)
        if buf is None:
            return set()
        if persistent:
            return _Stamps(None, 0)
        return _Stamps(buf.stamps, suite.quant.next_stamp())

    def _mark(self, visited, ids: np.ndarray, suite: ProviderSuite) -> None:
        if isinstance(visited, _Stamps):
            buf = suite.buffers()
            marks = visited.array(len(buf.row_ids))
            for i in ids.tolist():
                marks[buf.row_of[int(i)]] = visited.stamp
        else:
            visited.update(int(i) for i in ids.tolist())

    async def _search(
        self,
        suite: ProviderSuite,
        q: np.ndarray,
        L: int,
        matcher: Optional[IdSet],
        beta: float,
        counters: Counters,
        start: Optional[int] = None,
    ) -> tuple[_Frontier, np.ndarray, Visited]:
        if start is None:
            start = (await self._meta(suite)).start
        front = _Frontier()
        if start is None:
            return front, _EMPTY_IDS, Visited.empty(self.m)
        qt = QueryTables.build(self.registry, q)
        seed = await self._seed(suite, qt, start, matcher, beta, counters)
        if seed is None:
            return front, _EMPTY_IDS, Visited.empty(self.m)
        # no suspension point may separate marking from the traversal
        visited = self._visited_marker(suite)
        self._mark(visited, np.array([start], dtype=np.uint64), suite)
        front.set(seed.ids, seed.keys, seed.dists, np.zeros(1, dtype=bool))
        expanded, vis = await self._traverse(suite, qt, front, L, matcher, beta, visited, counters)
        return front, expanded, seed.extend(vis)

    async def greedy_search(
        self, suite: ProviderSuite, q: np.ndarray, k: int, L: int,
        counters: Optional[Counters] = None,
    ) -> SearchResult:
        """Best-first search from the start node; the closest k of all visited vertices."""
        if L < k:
            raise ConfigError(f"search list size L={L} must be >= k={k}")
        counters = counters if counters is not None else Counters()
        _, expanded, vis = await self._search(suite, q, L, None, 1.0, counters)
        top = np.lexsort((vis.ids, vis.dists))[:k]
        return SearchResult(vis.ids[top], vis.dists[top], vis, expanded)

    async def beta_search(
        self, suite: ProviderSuite, q: np.ndarray, matcher: IdSet, k: int, L: int,
        beta: float, counters: Optional[Counters] = None,
    ) -> SearchResult:
        """Search whose keys for filter-matching vertices are scaled by ``beta``.

        Returns the closest k matching vertices among those visited (possibly
        fewer).
        """
        if not 0.0 < beta <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {beta}")
        if L < k:
            raise ConfigError(f"search list size L={L} must be >= k={k}")
        counters = counters if counters is not None else Counters()
        _, expanded, vis = await self._search(suite, q, L, matcher, beta, counters)
        ok = matcher.contains(vis.ids)
        ids, dists = vis.ids[ok], vis.dists[ok]
        top = np.lexsort((ids, dists))[:k]
        return SearchResult(ids[top], dists[top], vis, expanded)

    def paginated(
        self, suite: ProviderSuite, q: np.ndarray, L: int, matcher: Optional[IdSet] = None,
        beta: float = 1.0, counters: Optional[Counters] = None,
    ) -> "PaginatedSearch":
        return PaginatedSearch(self, suite, q, L, matcher, beta, counters)

    # ------------------------------------------------------------------ prune

    async def _vectors(
        self, suite: ProviderSuite, ids: np.ndarray, cache: _CodeCache, counters: Counters,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Decoded PQ vectors for ``ids``; ids without a quantized term are dropped."""
        ids = np.asarray(ids, dtype=np.uint64)
        hit, pos = cache.lookup(ids)
        missing = ids[~hit]
        if len(missing):
            batch = await self._quant(suite, missing, counters)
            cache.add(batch.ids[batch.found], batch.codes[batch.found], batch.versions[batch.found])
            hit, pos = cache.lookup(ids)
        ids = ids[hit]
        pos = pos[hit]
        return ids, self.registry.decode(cache.codes[pos], cache.versions[pos])

    async def robust_prune(
        self,
        suite: ProviderSuite,
        p: int,
        candidates: Sequence[int],
        current: Optional[Sequence[int]] = None,
        cache: Optional[_CodeCache] = None,
        counters: Optional[Counters] = None,
    ) -> list[int]:
        """Select at most R out-neighbors of ``p`` from ``candidates`` and its current list.

        ``current`` is ``p``'s out-list when the caller already holds it;
        otherwise it is read. Returns ids ordered by distance to ``p``.
        """
        counters = counters if counters is not None else Counters()
        cache = cache if cache is not None else _CodeCache(self.m)
        if current is None:
            cur = await self._neighbors(suite, p, counters)
            current = [] if cur is None else cur.tolist()
        pool = np.unique(np.concatenate([
            np.asarray(list(candidates), dtype=np.uint64).reshape(-1),
            np.asarray(list(current), dtype=np.uint64).reshape(-1),
        ]))
        pool = pool[pool != np.uint64(p)]
        if len(pool) == 0:
            return []
        p_ids, p_vec = await self._vectors(suite, np.array([p], dtype=np.uint64), cache, counters)
        if len(p_ids) == 0:
            raise NotFoundError(p)
        ids, vecs = await self._vectors(suite, pool, cache, counters)
        if len(ids) == 0:
            return []
        keep = K.prune_kernel(p_vec[0], vecs, float(self.config.alpha),
                              int(self.config.degree_bound), self._rule)
        counters.cmps += len(ids)
        return [int(i) for i in ids[keep]]

    # ----------------------------------------------------------------- insert

    async def _candidates(
        self, suite: ProviderSuite, doc_id: int, start: int, counters: Counters,
    ) -> tuple[list[int], _CodeCache]:
        """Out-list for a vertex about to be (re)inserted, from a search in quantized space."""
        q = await self._query_vector(suite, doc_id, counters)
        L = self.config.build_list_size
        _, expanded, vis = await self._search(suite, q, L, None, 1.0, counters, start=start)
        cache = _CodeCache(self.m)
        cache.add(vis.ids, vis.codes, vis.versions)
        cur = await self._neighbors(suite, doc_id, counters)
        current = [] if cur is None else cur.tolist()
        nout = await self.robust_prune(suite, doc_id, expanded, current, cache, counters)
        return nout, cache

    async def _back_edges(
        self, suite: ProviderSuite, target: int, new: list[int], cache: _CodeCache,
        counters: Counters,
    ) -> Optional[NeighborPatch]:
        """One patch adding ``new`` to ``target``'s out-list, pruning past the slack bound."""
        cur = await self._neighbors(suite, target, counters)
        current = [] if cur is None else cur.tolist()
        have = set(current)
        add = [n for n in new if n not in have and n != target]
        if not add:
            return None
        if len(current) + len(add) > self.config.max_degree:
            pruned = await self.robust_prune(suite, target, add, current, cache, counters)
            return NeighborPatch(NeighborOp.OVERWRITE, tuple(pruned))
        return NeighborPatch(NeighborOp.APPEND, tuple(add))

    async def _apply(self, suite: ProviderSuite, patches) -> None:
        if patches:
            await resolve(suite.neighbors.apply_neighbor_patches(suite.context, patches))

    async def _store_meta(self, suite: ProviderSuite, meta: GraphMeta) -> None:
        await resolve(suite.meta.store_meta(suite.context, meta))

    async def _require_live(self, suite: ProviderSuite, doc_id: int, counters: Counters) -> None:
        batch = await self._quant(suite, [doc_id], counters)
        if not batch.found[0]:
            raise NotFoundError(doc_id)

    async def insert(self, suite: ProviderSuite, doc_id: int, counters: Optional[Counters] = None) -> None:
        """Link a new vertex whose document and quantized term are already stored."""
        counters = counters if counters is not None else Counters()
        async with self._lock(suite):
            await self._insert_locked(suite, int(doc_id), counters, replacing=False)

    async def _insert_locked(self, suite, doc_id: int, counters: Counters, replacing: bool) -> None:
        meta = await self._meta(suite)
        if not replacing:
            await self._require_live(suite, doc_id, counters)
            if await self._neighbors(suite, doc_id, counters) is not None:
                raise ContractError(f"id {doc_id} is already in the graph")
        if meta.start is None:
            await self._apply(suite, [(doc_id, NeighborPatch(NeighborOp.OVERWRITE, ()))])
            meta.start = doc_id
            meta.live_count = 1
            await self._store_meta(suite, meta)
            return
        buf = self._buffers(suite)
        if buf is not None and not replacing:
            await self._insert_fused(suite, buf, doc_id, meta.start, counters)
            meta.live_count += 1
            await self._store_meta(suite, meta)
            return
        nout, cache = await self._candidates(suite, doc_id, meta.start, counters)
        patches = [(doc_id, NeighborPatch(NeighborOp.OVERWRITE, tuple(nout)))]
        for j in nout:
            patch = await self._back_edges(suite, j, [doc_id], cache, counters)
            if patch is not None:
                patches.append((j, patch))
        await self._apply(suite, patches)
        if not replacing:
            meta.live_count += 1
            await self._store_meta(suite, meta)

    async def _insert_fused(self, suite, buf, doc_id: int, start: int, counters: Counters) -> None:
        """Same steps as the provider path, run in one kernel call on dense buffers."""
        q = await self._query_vector(suite, doc_id, counters)
        qt = QueryTables.build(self.registry, q)
        cents, dim_off = self._centroids()
        cfg = self.config
        counts = K.insert_kernel(
            buf.adj, buf.deg, buf.has_adj, buf.codes, buf.versions, qt.lut, buf.alive,
            buf.row_ids, qt.tables, qt.offsets, cents, dim_off, buf.row_of[doc_id],
            buf.row_of[start], cfg.build_list_size, float(cfg.alpha), cfg.degree_bound,
            cfg.max_degree, self._rule, buf.stamps, suite.quant.next_stamp(), buf.cache_marks,
        )
        counters.quant_reads += int(counts[0])
        counters.adj_reads += int(counts[1])
        counters.cmps += int(counts[2])
        counters.hops += int(counts[3])

    async def replace(self, suite: ProviderSuite, doc_id: int, counters: Optional[Counters] = None) -> None:
        """Re-link a vertex after its document and quantized term were overwritten.

        Edges pointing at the vertex are kept; stale ones disappear through
        later prunes.
        """
        counters = counters if counters is not None else Counters()
        async with self._lock(suite):
            await self._require_live(suite, int(doc_id), counters)
            await self._insert_locked(suite, int(doc_id), counters, replacing=True)

    async def minibatch_insert(
        self, suite: ProviderSuite, ids: Sequence[int], counters: Optional[Counters] = None,
    ) -> None:
        """Insert up to ``minibatch_max`` vertices with one atomic patch batch.

        Out-lists of the new vertices are computed against the graph as it was
        before the batch; back-edges are then grouped per target so each
        target receives exactly one patch.
        """
        counters = counters if counters is not None else Counters()
        ids = [int(i) for i in ids]
        if len(set(ids)) != len(ids):
            raise ContractError("duplicate ids within a mini-batch")
        if len(ids) > self.config.minibatch_max:
            raise ContractError(f"mini-batch of {len(ids)} exceeds {self.config.minibatch_max}")
        if not ids:
            return
        async with self._lock(suite):
            for doc_id in ids:
                await self._require_live(suite, doc_id, counters)
                if await self._neighbors(suite, doc_id, counters) is not None:
                    raise ContractError(f"id {doc_id} is already in the graph")
            meta = await self._meta(suite)
            # A pre-batch graph smaller than the batch cannot absorb it: every
            # new vertex would link to the same few nodes, whose prunes then
            # drop most of the back-edges. Grow it one vertex at a time first.
            while ids and meta.live_count < len(ids):
                await self._insert_locked(suite, ids[0], counters, replacing=False)
                ids = ids[1:]
                meta = await self._meta(suite)
            if not ids:
                return
            start = meta.start

            async def phase_one(doc_id: int):
                local = Counters()
                nout, cache = await self._candidates(suite, doc_id, start, local)
                return nout, cache, local

            if self.concurrent:
                results = await asyncio.gather(*(phase_one(i) for i in ids))
            else:
                results = [await phase_one(i) for i in ids]
            cache = _CodeCache(self.m)
            patches = []
            incoming: dict[int, list[int]] = {}
            for doc_id, (nout, c, local) in zip(ids, results):
                counters.add(local)
                cache.add(c.ids, c.codes, c.versions)
                patches.append((doc_id, NeighborPatch(NeighborOp.OVERWRITE, tuple(nout))))
                for b in nout:
                    incoming.setdefault(b, []).append(doc_id)
            for b in sorted(incoming):
                patch = await self._back_edges(suite, b, incoming[b], cache, counters)
                if patch is not None:
                    patches.append((b, patch))
            await self._apply(suite, patches)
            meta.live_count += len(ids)
            await self._store_meta(suite, meta)

    # ----------------------------------------------------------------- delete

    async def _closest(
        self, suite: ProviderSuite, anchor: int, pool: np.ndarray, c: int, cache: _CodeCache,
        counters: Counters,
    ) -> list[int]:
        """The ``c`` members of ``pool`` nearest to ``anchor`` in decoded PQ space."""
        pool = pool[pool != np.uint64(anchor)]
        if len(pool) == 0:
            return []
        a_ids, a_vec = await self._vectors(suite, np.array([anchor], dtype=np.uint64), cache, counters)
        ids, vecs = await self._vectors(suite, np.unique(pool), cache, counters)
        if len(a_ids) == 0 or len(ids) == 0:
            return []
        diff = vecs.astype(np.float64) - a_vec[0].astype(np.float64)
        d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        counters.cmps += len(ids)
        return [int(i) for i in ids[np.lexsort((ids, d))[:c]]]

    async def _promote_start(
        self, suite: ProviderSuite, meta: GraphMeta, p: int, nout: np.ndarray, cache: _CodeCache,
        counters: Counters,
    ) -> None:
        if meta.live_count == 0:
            meta.start = None
            return
        best = await self._closest(suite, p, nout, 1, cache, counters)
        if best:
            meta.start = best[0]
            return
        live = await resolve(suite.quant.scan_quantized(suite.context))
        live_ids = live.ids[live.ids != np.uint64(p)]
        meta.start = int(live_ids.min()) if len(live_ids) else None

    async def _start_delete(self, suite, doc_id: int, counters: Counters):
        meta = await self._meta(suite)
        batch = await self._quant(suite, [doc_id], counters)
        if not batch.found[0]:
            raise NotFoundError(doc_id)
        cache = _CodeCache(self.m)
        cache.add(batch.ids, batch.codes, batch.versions)
        cur = await self._neighbors(suite, doc_id, counters)
        nout = _EMPTY_IDS if cur is None else cur
        return meta, cache, nout, cur is not None

    async def _finish_delete(self, suite, meta, doc_id, nout, cache, counters) -> None:
        await resolve(suite.quant.delete_quantized(suite.context, doc_id))
        meta.live_count -= 1
        meta.deleted_pending.add(doc_id)
        if meta.start == doc_id:
            await self._promote_start(suite, meta, doc_id, nout, cache, counters)
        await self._store_meta(suite, meta)

    async def drop_delete(self, suite: ProviderSuite, doc_id: int, counters: Optional[Counters] = None) -> None:
        """Remove a vertex's terms only; in-edges are left for background consolidation."""
        counters = counters if counters is not None else Counters()
        doc_id = int(doc_id)
        async with self._lock(suite):
            meta, cache, nout, has_adj = await self._start_delete(suite, doc_id, counters)
            if has_adj:
                await self._apply(suite, [(doc_id, NeighborPatch(NeighborOp.DELETE))])
            await self._finish_delete(suite, meta, doc_id, nout, cache, counters)

    async def inplace_delete(self, suite: ProviderSuite, doc_id: int, counters: Optional[Counters] = None) -> None:
        """Remove a vertex and repair the connections that ran through it.

        In-neighbors found within two hops are spliced to the vertex's closest
        out-neighbors, and the out-neighbors are cross-linked among themselves.
        """
        counters = counters if counters is not None else Counters()
        p = int(doc_id)
        c = self.config.replace_closest
        R = self.config.degree_bound
        async with self._lock(suite):
            meta, cache, nout, has_adj = await self._start_delete(suite, p, counters)
            lists: dict[int, list[int]] = {}

            async def out_list(v: int) -> list[int]:
                if v not in lists:
                    cur = await self._neighbors(suite, v, counters)
                    lists[v] = [] if cur is None else cur.tolist()
                return lists[v]

            changed: set[int] = set()
            two_hop = set(nout.tolist())
            for v in nout.tolist():
                two_hop.update(await out_list(v))
            two_hop.discard(p)
            in_nbrs = [b for b in sorted(two_hop) if p in await out_list(b)]

            for b in in_nbrs:
                nb = [x for x in lists[b] if x != p]
                for x in await self._closest(suite, b, nout, c, cache, counters):
                    if x not in nb:
                        nb.append(x)
                if len(nb) > R:
                    nb = await self.robust_prune(suite, b, nb, nb, cache, counters)
                lists[b] = nb
                changed.add(b)

            for b in nout.tolist():
                for x in await self._closest(suite, b, nout, c, cache, counters):
                    nx = list(await out_list(x))
                    if b in nx or b == x:
                        continue
                    nx.append(b)
                    if len(nx) > R:
                        nx = await self.robust_prune(suite, x, nx, nx, cache, counters)
                    lists[x] = nx
                    changed.add(x)

            patches = [(v, NeighborPatch(NeighborOp.OVERWRITE, tuple(lists[v])))
                       for v in sorted(changed) if v != p]
            if has_adj:
                patches.append((p, NeighborPatch(NeighborOp.DELETE)))
            await self._apply(suite, patches)
            await self._finish_delete(suite, meta, p, nout, cache, counters)

    async def consolidate_deleted(self, suite: ProviderSuite, budget: int) -> ConsolidationReport:
        """Strip deleted ids from up to ``budget`` adjacency lists, resuming where the last call stopped.

        A deleted id is released once a full pass over all lists finds no
        reference to it.
        """
        if budget <= 0:
            raise ConfigError("budget must be positive")
        report = ConsolidationReport()
        async with self._lock(suite):
            meta = await self._meta(suite)
            if not meta.deleted_pending:
                return report
            if meta.cursor is None:
                meta.cycle_pending = set(meta.deleted_pending)
            rows = await resolve(suite.neighbors.scan_neighbors(suite.context, meta.cursor, budget))
            dead = meta.deleted_pending
            patches = []
            for v, nbrs in rows:
                report.scanned += 1
                hits = [n for n in nbrs.tolist() if n in dead]
                if not hits:
                    continue
                meta.cycle_pending.difference_update(hits)
                keep = [n for n in nbrs.tolist() if n not in dead]
                patches.append((v, NeighborPatch(NeighborOp.OVERWRITE, tuple(keep))))
                report.rewritten += 1
                report.edges_removed += len(hits)
            await self._apply(suite, patches)
            if len(rows) < budget:
                report.cycle_completed = True
                report.released = sorted(meta.cycle_pending)
                meta.deleted_pending.difference_update(meta.cycle_pending)
                meta.cycle_pending = set()
                meta.cursor = None
            else:
                meta.cursor = rows[-1][0]
            await self._store_meta(suite, meta)
        return report


class _Stamps:
    """Visited marker for kernel traversals.

    Shared markers reuse the backend's stamp array with a fresh stamp value;
    private markers own their array so they survive between pages.
    """

    def __init__(self, shared: Optional[np.ndarray], stamp: int) -> None:
        self._shared = shared
        self._own = np.full(0, -1, dtype=np.int64)
        self.stamp = stamp

    def array(self, n: int) -> np.ndarray:
        if self._shared is not None:
            return self._shared
        if len(self._own) < n:
            grown = np.full(max(n, 2 * len(self._own)), -1, dtype=np.int64)
            grown[:len(self._own)] = self._own
            self._own = grown
        return self._own


class PaginatedSearch:
    """Resumable search returning successive pages of unreturned vertices.

    ``best`` holds at most L entries; everything visited but not in ``best``
    waits in ``backup``. Each page finishes expanding ``best``, returns its k
    closest entries and removes them; the next page first refills ``best``
    from ``backup``. The visited set persists, so no id is returned twice.
    """

    def __init__(
        self,
        engine: GraphEngine,
        suite: ProviderSuite,
        q: np.ndarray,
        L: int,
        matcher: Optional[IdSet] = None,
        beta: float = 1.0,
        counters: Optional[Counters] = None,
    ) -> None:
        if not 0.0 < beta <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {beta}")
        self.engine = engine
        self.suite = suite
        self.q = q
        self.L = L
        self.matcher = matcher
        self.beta = beta
        self.counters = counters if counters is not None else Counters()
        self.front = _Frontier()
        self.backup: list[tuple[float, int, float, bool]] = []
        self.returned: set[int] = set()
        self.pages = 0
        self.exhausted = False
        self._visited = None
        self._qt: Optional[QueryTables] = None

    async def _start(self) -> None:
        eng = self.engine
        meta = await eng._meta(self.suite)
        self._visited = eng._visited_marker(self.suite, persistent=True)
        if meta.start is None:
            return
        self._qt = QueryTables.build(eng.registry, self.q)
        seed = await eng._seed(self.suite, self._qt, meta.start, self.matcher, self.beta, self.counters)
        eng._mark(self._visited, np.array([meta.start], dtype=np.uint64), self.suite)
        if seed is not None:
            self.front.set(seed.ids, seed.keys, seed.dists, np.zeros(1, dtype=bool))

    def _refill(self) -> None:
        need = self.L - len(self.front)
        if need <= 0 or not self.backup:
            return
        take = [heapq.heappop(self.backup) for _ in range(min(need, len(self.backup)))]
        ids = np.array([t[1] for t in take], dtype=np.uint64)
        keys = np.array([t[0] for t in take], dtype=np.float32)
        dists = np.array([t[2] for t in take], dtype=np.float32)
        exp = np.array([t[3] for t in take], dtype=bool)
        f = self.front
        all_ids = np.concatenate([f.ids, ids])
        all_keys = np.concatenate([f.keys, keys])
        order = np.lexsort((all_ids, all_keys))
        f.set(all_ids[order], all_keys[order], np.concatenate([f.dists, dists])[order],
              np.concatenate([f.exp, exp])[order])

    async def next_page(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Up to ``k`` (id, quantized distance) pairs in navigation-key order."""
        if k <= 0:
            raise ConfigError("page size must be positive")
        if self.exhausted:
            return _EMPTY_IDS, np.empty(0, dtype=np.float32)
        if self._visited is None:
            await self._start()
        else:
            self._refill()
        f = self.front
        prev = (f.ids.copy(), f.keys.copy(), f.dists.copy(), f.exp.copy())
        if len(f) and self._qt is not None:
            expanded, vis = await self.engine._traverse(
                self.suite, self._qt, f, self.L, self.matcher, self.beta,
                self._visited, self.counters)
        else:
            expanded, vis = _EMPTY_IDS, Visited.empty(self.engine.m)
        done = set(expanded.tolist())
        kept = set(f.ids.tolist())
        for i, key, d, e in zip(prev[0].tolist(), prev[1].tolist(), prev[2].tolist(), prev[3].tolist()):
            if i not in kept:
                heapq.heappush(self.backup, (key, i, d, bool(e) or i in done))
        for i, key, d in zip(vis.ids.tolist(), vis.keys.tolist(), vis.dists.tolist()):
            if i not in kept:
                heapq.heappush(self.backup, (key, i, d, i in done))
        n = min(k, len(f))
        ids, dists = f.ids[:n], f.dists[:n]
        f.set(f.ids[n:], f.keys[n:], f.dists[n:], f.exp[n:])
        self.returned.update(ids.tolist())
        self.pages += 1
        self.counters.pages += 1
        if n == 0:
            self.exhausted = True
        return ids, dists
