from kvann.query.collection import (
    AllOf,
    Collection,
    CollectionStats,
    PartitionedCollection,
    QuantizationPolicy,
    ShardFilter,
    partition_of,
)
from kvann.query.executor import (
    CostReport,
    FanoutError,
    QueryResult,
    execute,
    fanout_query,
    qflat_query,
    search,
    sharded_query,
)
from kvann.query.planner import PlannerConfig, QueryPlan, VectorQuery, plan

__all__ = [
    "AllOf",
    "Collection",
    "CollectionStats",
    "CostReport",
    "FanoutError",
    "PartitionedCollection",
    "PlannerConfig",
    "QuantizationPolicy",
    "QueryPlan",
    "QueryResult",
    "ShardFilter",
    "VectorQuery",
    "execute",
    "fanout_query",
    "partition_of",
    "plan",
    "qflat_query",
    "search",
    "sharded_query",
]

from kvann.query.persist import load_collection, save_collection  # noqa: E402

__all__ += ["load_collection", "save_collection"]
