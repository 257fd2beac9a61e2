"""Query parameters and plan selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from kvann.core import ConfigError, IdSet
from kvann.query.collection import CollectionStats, Predicate

PATHS = ("brute_force", "flat_scan", "qflat_scan", "diskann", "diskann_filter_aware", "range_fetch")
DEFAULT_FILTER_BETA = 0.3


@dataclass(frozen=True)
class VectorQuery:
    """A top-k request with the knobs of a vector-distance query.

    ``beta`` defaults to 0.3 when a filter is given and 1.0 otherwise; a
    filtered query with ``beta=1.0`` is plain post-filtering.
    """

    query_vector: np.ndarray = field(compare=False)
    k: int
    exact: bool = False
    search_list_multiplier: float = 10.0
    quant_list_multiplier: float = 7.0
    filter: Optional[Predicate] = None
    shard_key: Optional[bytes] = None
    beta: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "query_vector", np.asarray(self.query_vector, dtype=np.float32).reshape(-1))
        if self.k <= 0:
            raise ConfigError("k must be positive")
        if self.search_list_multiplier <= 0 or self.quant_list_multiplier <= 0:
            raise ConfigError("list multipliers must be positive")
        if self.beta is not None and not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")

    @property
    def search_list_size(self) -> int:
        return math.ceil(self.search_list_multiplier * self.k)

    @property
    def rerank_size(self) -> int:
        return math.ceil(self.quant_list_multiplier * self.k)

    @property
    def effective_beta(self) -> float:
        if self.beta is not None:
            return self.beta
        return DEFAULT_FILTER_BETA if self.filter is not None else 1.0


@dataclass(frozen=True)
class PlannerConfig:
    """Thresholds of the plan rules.

    Args:
        brute_force_below: collections with fewer live documents are scanned exactly.
        graph_selectivity: filters matching at least this many documents use
            the graph; fewer go to ``range_fetch``.
        density_ratio: below the selectivity threshold, matches whose id span
            is at most this multiple of their count are range-scanned;
            otherwise their documents are fetched one by one.
        max_pages: pagination budget of the graph paths.
        page_size: ids per page of the graph paths; ``None`` uses the
            query's k.
    """

    brute_force_below: int = 1000
    graph_selectivity: int = 5000
    density_ratio: float = 4.0
    max_pages: int = 20
    page_size: Optional[int] = None


@dataclass
class QueryPlan:
    path: str
    partitions: list = field(default_factory=list)
    filter_bitmap: Optional[IdSet] = None
    selectivity: Optional[int] = None
    range_scan: bool = False
    trace: list[str] = field(default_factory=list)

    def describe(self) -> dict:
        return {
            "path": self.path,
            "partitions": [None if p is None else p.hex() for p in self.partitions],
            "selectivity": self.selectivity,
            "range_scan": self.range_scan,
            "trace": list(self.trace),
        }


def plan(
    query: VectorQuery,
    stats: CollectionStats,
    matches: Optional[IdSet] = None,
    config: PlannerConfig = PlannerConfig(),
    partition=None,
) -> QueryPlan:
    """Pick an execution path from the query and the target index's statistics.

    ``matches`` is the filter bitmap (required when the query has a filter).
    Pure: equal inputs give equal plans.
    """
    trace = [f"live_count={stats.live_count}"]
    if query.filter is not None and matches is None:
        raise ConfigError("a filtered query needs its filter bitmap to be planned")
    sel = len(matches) if matches is not None else None
    out = QueryPlan("brute_force", [partition], matches, sel, trace=trace)
    if sel is not None:
        trace.append(f"filter selectivity={sel}")
    if stats.live_count < config.brute_force_below:
        trace.append(f"live_count < {config.brute_force_below}: exact scan of a small collection")
        return out
    if query.exact:
        trace.append("exact=true: full-precision scan" + (" after filtering" if sel is not None else ""))
        out.path = "flat_scan"
        return out
    if not stats.has_quant:
        trace.append("no quantized terms: full-precision scan")
        out.path = "flat_scan"
        return out
    if sel is not None and sel < config.graph_selectivity:
        out.path = "range_fetch"
        if sel:
            span = int(matches.ids[-1]) - int(matches.ids[0]) + 1
            out.range_scan = span <= config.density_ratio * sel
            trace.append(f"selectivity < {config.graph_selectivity}: "
                         + (f"id span {span} is dense, range scan of quantized terms" if out.range_scan
                            else f"id span {span} is sparse, per-id document fetch"))
        return out
    if not stats.has_graph:
        trace.append("no graph: quantized flat scan")
        out.path = "qflat_scan"
        return out
    if sel is not None:
        trace.append(f"selectivity >= {config.graph_selectivity}: filter-aware graph search, "
                     f"beta={query.effective_beta}")
        out.path = "diskann_filter_aware"
        return out
    trace.append(f"graph search L={query.search_list_size}, rerank {query.rerank_size}")
    out.path = "diskann"
    return out
