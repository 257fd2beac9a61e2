"""Proximity-graph algorithms over pluggable storage providers."""

from kvann.graph.engine import (
    ConsolidationReport,
    GraphEngine,
    PaginatedSearch,
    QueryTables,
    SearchResult,
)
from kvann.graph.providers import (
    DocumentVectors,
    ExecutionContext,
    GraphMeta,
    MemoryBackend,
    NeighborOp,
    NeighborPatch,
    ProviderSuite,
    QuantBatch,
    StoreBackend,
    resolve,
)

__all__ = [
    "ConsolidationReport",
    "DocumentVectors",
    "ExecutionContext",
    "GraphEngine",
    "GraphMeta",
    "MemoryBackend",
    "NeighborOp",
    "NeighborPatch",
    "PaginatedSearch",
    "ProviderSuite",
    "QuantBatch",
    "QueryTables",
    "SearchResult",
    "StoreBackend",
    "resolve",
]
