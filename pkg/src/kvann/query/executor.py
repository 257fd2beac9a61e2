"""Plan execution: graph pagination, quantized scans, exact scans, rerank and merging."""

from __future__ import annotations

import asyncio
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from kvann.core import Counters, IdSet, KvannError, distances, prepare_embedding, rank_order, user_distance
from kvann.graph import QueryTables, resolve
from kvann.query.collection import AllOf, Collection, PartitionedCollection, ShardFilter
from kvann.query.planner import PlannerConfig, QueryPlan, VectorQuery, plan

log = logging.getLogger(__name__)

_NO_IDS = np.empty(0, dtype=np.uint64)
_NO_DISTS = np.empty(0, dtype=np.float32)


class FanoutError(KvannError):
    """A partition failed, so the fan-out query as a whole failed."""


@dataclass
class CostReport:
    """Reads and distance computations charged to one query."""

    quant_reads: int = 0
    adj_reads: int = 0
    fullprec_reads: int = 0
    distance_ops: int = 0
    pages: int = 0

    @classmethod
    def from_counters(cls, c: Counters) -> "CostReport":
        return cls(c.quant_reads, c.adj_reads, c.fullprec_reads, c.cmps, c.pages)

    def add(self, other: "CostReport") -> "CostReport":
        for f in dataclasses.fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def as_dict(self) -> dict[str, int]:
        return dataclasses.asdict(self)


@dataclass
class QueryResult:
    """Top-k ids ascending by distance.

    ``distances`` are internal values (squared for euclidean); ``to_json``
    reports user-facing ones.
    """

    ids: np.ndarray
    distances: np.ndarray
    cost: CostReport
    plan: Optional[QueryPlan] = None
    metric: str = "euclidean"
    partition_costs: list[CostReport] = field(default_factory=list)

    def to_json(self) -> str:
        out = {
            "ids": [int(i) for i in self.ids],
            "distances": [user_distance(float(d), self.metric) for d in self.distances],
            "cost": self.cost.as_dict(),
        }
        if self.plan is not None:
            out["path"] = self.plan.path
        if self.partition_costs:
            out["partition_costs"] = [c.as_dict() for c in self.partition_costs]
        return json.dumps(out, sort_keys=True)


def _empty(query_plan: Optional[QueryPlan], counters: Counters, metric: str) -> QueryResult:
    return QueryResult(_NO_IDS, _NO_DISTS, CostReport.from_counters(counters), query_plan, metric)


def _top(ids: np.ndarray, dists: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    order = rank_order(ids, dists)[:k]
    return ids[order], dists[order]


async def _rerank(col: Collection, suite, q: np.ndarray, ids: np.ndarray, k: int,
                  counters: Counters) -> tuple[np.ndarray, np.ndarray]:
    """Exact distances for quantized-space candidates; the k closest."""
    if len(ids) == 0:
        return _NO_IDS, _NO_DISTS
    if suite is not None:
        mat, found = await resolve(suite.vectors.get_vectors(suite.context, ids.tolist()))
    else:
        mat, found = col.docs.fetch_vectors(ids.tolist())
    counters.fullprec_reads += len(ids)
    ids, mat = ids[found], mat[found]
    d = distances(q, mat, col.config.metric)
    counters.cmps += len(d)
    return _top(ids, d, k)


def _exact(col: Collection, q: np.ndarray, ids, k: int, counters: Counters):
    ids, mat = col.docs.matrix(ids)
    counters.fullprec_reads += len(ids)
    if len(ids) == 0:
        return _NO_IDS, _NO_DISTS
    d = distances(q, mat, col.config.metric)
    counters.cmps += len(d)
    return _top(ids, d, k)


def _closest_quantized(col: Collection, q: np.ndarray, batch, keep: Optional[IdSet], n: int,
                       counters: Counters) -> np.ndarray:
    ids, codes, versions = batch.ids, batch.codes, batch.versions
    if keep is not None:
        sel = keep.contains(ids)
        ids, codes, versions = ids[sel], codes[sel], versions[sel]
    if len(ids) == 0:
        return _NO_IDS
    d = QueryTables.build(col.registry, q).distances(codes, versions)
    counters.cmps += len(d)
    return ids[rank_order(ids, d)[:n]]


async def _graph(col: Collection, suite, q: np.ndarray, query: VectorQuery, p: QueryPlan,
                 cfg: PlannerConfig, counters: Counters) -> np.ndarray:
    """Paginate until enough predicate-passing candidates are gathered."""
    target = query.rerank_size
    matcher = p.filter_bitmap
    beta = query.effective_beta if matcher is not None else 1.0
    search = col.engine.paginated(suite, q, query.search_list_size,
                                  matcher if beta < 1.0 else None, beta, counters)
    got_ids, got_d = [], []
    have = 0
    while have < target and search.pages < cfg.max_pages:
        ids, d = await search.next_page(cfg.page_size or query.k)
        if len(ids) == 0:
            break
        if matcher is not None:
            ok = matcher.contains(ids)
            ids, d = ids[ok], d[ok]
        got_ids.append(ids)
        got_d.append(d)
        have += len(ids)
    p.trace.append(f"pages={search.pages} candidates={have}")
    if not got_ids:
        return _NO_IDS
    ids = np.concatenate(got_ids)
    d = np.concatenate(got_d)
    return ids[rank_order(ids, d)[:target]]


async def execute(col: Collection, p: QueryPlan, query: VectorQuery,
                  cfg: PlannerConfig = PlannerConfig(), counters: Optional[Counters] = None) -> QueryResult:
    """Run a plan against one logical index of ``col`` and rerank in full precision."""
    counters = counters if counters is not None else Counters()
    metric = col.config.metric.value
    q = prepare_embedding(query.query_vector, col.config.dimension, col.config.metric)
    shard = p.partitions[0] if p.partitions else None
    suite = col.suite(shard)
    k = query.k
    if p.path in ("brute_force", "flat_scan"):
        scope = p.filter_bitmap.ids.tolist() if p.filter_bitmap is not None else col.members(shard)
        ids, d = _exact(col, q, scope, k, counters)
    elif p.path == "range_fetch":
        matched = p.filter_bitmap
        if len(matched) == 0:
            return _empty(p, counters, metric)
        if p.range_scan:
            lo, hi = int(matched.ids[0]), int(matched.ids[-1])
            batch = await resolve(suite.quant.scan_quantized(suite.context, lo, hi))
            counters.quant_reads += len(batch.ids)
            cand = _closest_quantized(col, q, batch, matched, query.rerank_size, counters)
            ids, d = await _rerank(col, suite, q, cand, k, counters)
        else:
            # documents are loaded individually; their distances are exact
            ids, d = await _rerank(col, suite, q, matched.ids, k, counters)
    elif p.path == "qflat_scan":
        batch = await resolve(suite.quant.scan_quantized(suite.context))
        counters.quant_reads += len(batch.ids)
        cand = _closest_quantized(col, q, batch, p.filter_bitmap, query.rerank_size, counters)
        ids, d = await _rerank(col, suite, q, cand, k, counters)
    elif p.path in ("diskann", "diskann_filter_aware"):
        cand = await _graph(col, suite, q, query, p, cfg, counters)
        ids, d = await _rerank(col, suite, q, cand, k, counters)
    else:
        raise KvannError(f"unknown plan path {p.path!r}")
    if log.isEnabledFor(logging.DEBUG):
        log.debug("plan %s", json.dumps(p.describe()))
    return QueryResult(ids, d, CostReport.from_counters(counters), p, metric)


def _merge(results: list[QueryResult], k: int, metric: str, p: Optional[QueryPlan]) -> QueryResult:
    ids = np.concatenate([r.ids for r in results]) if results else _NO_IDS
    d = np.concatenate([r.distances for r in results]) if results else _NO_DISTS
    ids, d = _top(ids, d, k)
    total = CostReport()
    for r in results:
        total.add(r.cost)
    return QueryResult(ids, d, total, p, metric, [r.cost for r in results])


async def sharded_query(col: Collection, query: VectorQuery,
                        cfg: PlannerConfig = PlannerConfig()) -> QueryResult:
    """Route to the single logical index of ``query.shard_key``.

    On a collection without shards the shard key becomes an extra filter.
    """
    if query.shard_key is None:
        raise KvannError("sharded_query needs a shard key")
    if not col.sharded:
        pred = ShardFilter(query.shard_key)
        if query.filter is not None:
            pred = AllOf((pred, query.filter))
        rewritten = dataclasses.replace(query, filter=pred, shard_key=None)
        result = await search(col, rewritten, cfg)
        if result.plan is not None:
            result.plan.trace.insert(0, "collection is not sharded: shard key applied as a filter")
        return result
    shard = query.shard_key
    stats = col.stats(shard)
    matches = None
    if query.filter is not None:
        members = col.match_ids(ShardFilter(shard))
        found = col.match_ids(query.filter)
        matches = IdSet(found.ids[members.contains(found.ids)])
    p = plan(query, stats, matches, cfg, partition=shard)
    if stats.live_count == 0:
        p.trace.append("unknown or empty shard")
        return _empty(p, Counters(), col.config.metric.value)
    return await execute(col, p, query, cfg)


async def search(col: Collection, query: VectorQuery,
                 cfg: PlannerConfig = PlannerConfig()) -> QueryResult:
    """Plan and execute a query on a collection.

    Queries with a shard key go to that shard; queries on a sharded
    collection without one run on every shard and are merged.
    """
    if query.shard_key is not None:
        return await sharded_query(col, query, cfg)
    if col.sharded:
        parts = [await sharded_query(col, dataclasses.replace(query, shard_key=key), cfg)
                 for key in col.shard_keys()]
        return _merge(parts, query.k, col.config.metric.value, None)
    matches = col.match_ids(query.filter) if query.filter is not None else None
    p = plan(query, col.stats(None), matches, cfg)
    if p.path == "brute_force" and col.stats(None).live_count == 0:
        return _empty(p, Counters(), col.config.metric.value)
    return await execute(col, p, query, cfg)


async def qflat_query(col: Collection, query: VectorQuery, shard: Optional[bytes] = None) -> QueryResult:
    """Scan every quantized term, keep the closest candidates and rerank them."""
    matches = col.match_ids(query.filter) if query.filter is not None else None
    p = QueryPlan("qflat_scan", [shard], matches, None if matches is None else len(matches),
                  trace=["quantized flat scan requested"])
    if col.suite(shard) is None:
        return _empty(p, Counters(), col.config.metric.value)
    return await execute(col, p, query)


async def fanout_query(pc: PartitionedCollection, query: VectorQuery,
                       cfg: PlannerConfig = PlannerConfig()) -> QueryResult:
    """Query every partition concurrently and merge by exact distance.

    Any partition failure fails the whole query.
    """
    results = await asyncio.gather(*(search(part, query, cfg) for part in pc.partitions),
                                   return_exceptions=True)
    for i, r in enumerate(results):
        if isinstance(r, BaseException):
            raise FanoutError(f"partition {i} failed: {r}") from r
    return _merge(list(results), query.k, pc.config.metric.value, None)
