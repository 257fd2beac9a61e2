"""A vector collection: documents, per-shard graph indices and the quantization lifecycle."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import mmh3
import numpy as np

from kvann.core import (
    ConfigError,
    ContractError,
    Counters,
    IdSet,
    IndexConfig,
    LabelFilter,
    NotFoundError,
    VectorRecord,
    prepare_embedding,
)
from kvann.graph import (
    DocumentVectors,
    ExecutionContext,
    GraphEngine,
    MemoryBackend,
    ProviderSuite,
    StoreBackend,
    resolve,
)
from kvann.quantization import SchemaRegistry, encode_batch, default_num_subspaces, train_schema
from kvann.storage import DocumentStore, OrderedStore, terms

log = logging.getLogger(__name__)

INDEX_KINDS = ("flat", "qflat", "diskann")
BACKENDS = ("memory", "store")
DELETE_POLICIES = ("drop", "inplace")


@dataclass(frozen=True)
class ShardFilter:
    """Matches documents whose shard key equals ``key``."""

    key: bytes


@dataclass(frozen=True)
class AllOf:
    """Conjunction of predicates."""

    parts: tuple

    def __post_init__(self) -> None:
        if not self.parts:
            raise ConfigError("AllOf needs at least one predicate")


Predicate = Union[LabelFilter, ShardFilter, AllOf]


@dataclass(frozen=True)
class QuantizationPolicy:
    """When PQ schemas are trained and how codes are refreshed.

    Args:
        initial_samples: live documents needed before the first schema is
            trained; until then the collection answers with exact scans.
        requantize_at: total inserts after which a warm-started schema
            replaces the first one. ``None`` disables it.
        requantize_samples: sample size for the warm-started schema.
        num_subspaces: code bytes per vector; ``None`` picks the default for
            the dimension.
        iterations: Lloyd iterations per subspace.
        backfill_batch: codes re-encoded per mutation call once a new schema
            is active; 0 re-encodes everything immediately.
        seed: seed for sampling and k-means.
    """

    initial_samples: int = 1000
    requantize_at: Optional[int] = 25000
    requantize_samples: int = 25000
    num_subspaces: Optional[int] = None
    iterations: int = 25
    backfill_batch: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.initial_samples < 256:
            raise ConfigError("initial_samples must be at least 256 (one per centroid)")
        if self.requantize_at is not None and self.requantize_at < self.initial_samples:
            raise ConfigError("requantize_at must not precede the initial schema")
        if self.backfill_batch < 0:
            raise ConfigError("backfill_batch must be >= 0")


@dataclass(frozen=True)
class CollectionStats:
    """What the planner needs to know about one logical index."""

    live_count: int
    has_quant: bool
    has_graph: bool
    sharded: bool


class _Shard:
    """One logical index: provider suite plus its member ids."""

    def __init__(self, suite: Optional[ProviderSuite]) -> None:
        self.suite = suite
        self.members: set[int] = set()
        self.indexed: set[int] = set()


class Collection:
    """Documents plus the quantized and graph index terms over their vectors.

    Args:
        config: graph and vector parameters.
        index_kind: ``"diskann"`` (graph over PQ codes), ``"qflat"`` (PQ codes
            only) or ``"flat"`` (full-precision scans only).
        backend: ``"memory"`` keeps index terms in dense arrays;
            ``"store"`` keeps them as terms in an ordered key-value store.
        sharded: one logical index per distinct shard key.
        policy: quantization lifecycle.
        insert_mode: ``"sequential"`` links one vertex at a time,
            ``"minibatch"`` links up to ``config.minibatch_max`` per batch.
        store: ordered store for the ``"store"`` backend (created if omitted).
        path: indexed property path; selects the term key prefix.
        concurrent: let mini-batches fan out phase-one work.
    """

    def __init__(
        self,
        config: IndexConfig,
        index_kind: str = "diskann",
        backend: str = "memory",
        sharded: bool = False,
        policy: QuantizationPolicy = QuantizationPolicy(),
        insert_mode: str = "sequential",
        store: Optional[OrderedStore] = None,
        path: str = "/embedding",
        concurrent: bool = True,
    ) -> None:
        if index_kind not in INDEX_KINDS:
            raise ConfigError(f"index_kind must be one of {INDEX_KINDS}")
        if backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")
        if insert_mode not in ("sequential", "minibatch"):
            raise ConfigError("insert_mode must be 'sequential' or 'minibatch'")
        self.config = config
        self.index_kind = index_kind
        self.backend = backend
        self.sharded = sharded
        self.policy = policy
        self.insert_mode = insert_mode
        self.path = path
        self.docs = DocumentStore(config.dimension)
        self.registry = SchemaRegistry()
        self.engine = GraphEngine(config, self.registry, concurrent=concurrent)
        self.store = store if store is not None else (
            OrderedStore(classify=terms.classify) if backend == "store" else None)
        self._store_backend = StoreBackend(self.store) if backend == "store" else None
        self._vectors = DocumentVectors(self.docs)
        self._shards: dict[Optional[bytes], _Shard] = {}
        self._rng = np.random.default_rng(policy.seed)
        self._labels: dict[int, int] = {}
        self._epoch = 0
        self._match_cache: dict = {}
        self._label_arrays = None
        self.inserted_total = 0
        self.requantized = False
        self._backfill: list[int] = []
        self.counters = Counters()

    # ------------------------------------------------------------- structure

    @property
    def uses_quant(self) -> bool:
        return self.index_kind in ("qflat", "diskann")

    @property
    def uses_graph(self) -> bool:
        return self.index_kind == "diskann"

    @property
    def quantized(self) -> bool:
        """True once a schema exists and index terms are maintained."""
        return self.uses_quant and len(self.registry) > 0

    def __len__(self) -> int:
        return len(self.docs)

    def shard_keys(self) -> list[Optional[bytes]]:
        return sorted(self._shards, key=lambda k: (k is not None, k or b""))

    def _shard_of(self, record: VectorRecord) -> Optional[bytes]:
        if not self.sharded:
            return None
        if record.shard_key is None:
            raise ContractError(f"sharded collection needs a shard key on record {record.id}")
        return record.shard_key

    def _make_suite(self, shard: Optional[bytes]) -> ProviderSuite:
        ctx = ExecutionContext(path=self.path, shard=shard)
        if self.backend == "store":
            be = self._store_backend
        else:
            be = MemoryBackend(self.registry.m, self.config.max_degree)
        return ProviderSuite(be, self._vectors, be, be, ctx)

    def _shard(self, key: Optional[bytes], create: bool = False) -> Optional[_Shard]:
        sh = self._shards.get(key)
        if sh is None and create:
            sh = self._shards[key] = _Shard(self._make_suite(key) if self.quantized else None)
        return sh

    def suite(self, shard: Optional[bytes] = None) -> Optional[ProviderSuite]:
        sh = self._shards.get(shard)
        return None if sh is None else sh.suite

    def members(self, shard: Optional[bytes] = None) -> set[int]:
        sh = self._shards.get(shard)
        return set() if sh is None else sh.members

    def stats(self, shard: Optional[bytes] = None) -> CollectionStats:
        if shard is None and self.sharded:
            live = len(self.docs)
            return CollectionStats(live, False, False, True)
        sh = self._shards.get(shard)
        live = 0 if sh is None else len(sh.members)
        ready = sh is not None and sh.suite is not None
        return CollectionStats(live, ready and self.uses_quant, ready and self.uses_graph, self.sharded)

    async def graph_live_ids(self, shard: Optional[bytes] = None) -> np.ndarray:
        """Ids with a quantized term in one logical index, ascending."""
        suite = self.suite(shard)
        if suite is None:
            return np.empty(0, dtype=np.uint64)
        return (await resolve(suite.quant.scan_quantized(suite.context))).ids

    # -------------------------------------------------------------- filters

    def _arrays(self):
        if self._label_arrays is None or self._label_arrays[0] != self._epoch:
            ids = np.fromiter(self._labels.keys(), dtype=np.uint64, count=len(self._labels))
            labs = np.fromiter(self._labels.values(), dtype=np.uint64, count=len(self._labels))
            order = np.argsort(ids, kind="stable")
            self._label_arrays = (self._epoch, ids[order], labs[order])
        return self._label_arrays[1], self._label_arrays[2]

    def match_ids(self, predicate: Predicate) -> IdSet:
        """Ids of live documents satisfying ``predicate``, cached until the next mutation."""
        key = (predicate, self._epoch)
        hit = self._match_cache.get(key)
        if hit is not None:
            return hit
        if isinstance(predicate, LabelFilter):
            ids, labs = self._arrays()
            bits = np.uint64(predicate.bits)
            if predicate.mode == "any":
                sel = (labs & bits) != 0
            elif predicate.mode == "all":
                sel = (labs & bits) == bits
            elif predicate.mode == "equal":
                sel = labs == bits
            else:
                raise ConfigError(f"unknown filter mode {predicate.mode!r}")
            out = IdSet(ids[sel])
        elif isinstance(predicate, ShardFilter):
            if self.sharded:
                out = IdSet(np.fromiter(self.members(predicate.key), dtype=np.uint64))
            else:
                out = IdSet(np.array([r.id for r in self.docs.records() if r.shard_key == predicate.key],
                                     dtype=np.uint64))
        elif isinstance(predicate, AllOf):
            parts = [self.match_ids(p) for p in predicate.parts]
            ids = parts[0].ids
            for p in parts[1:]:
                ids = ids[p.contains(ids)]
            out = IdSet(ids)
        else:
            raise ConfigError(f"unsupported predicate {predicate!r}")
        if len(self._match_cache) > 256:
            self._match_cache.clear()
        self._match_cache[key] = out
        return out

    def _touch(self) -> None:
        self._epoch += 1
        self._match_cache.clear()

    # ------------------------------------------------------------ lifecycle

    def _m(self) -> int:
        return self.policy.num_subspaces or default_num_subspaces(self.config.dimension)

    def _sample(self, size: int) -> np.ndarray:
        ids = np.array(self.docs.ids(), dtype=np.uint64)
        if len(ids) > size:
            ids = np.sort(self._rng.choice(ids, size=size, replace=False))
        _, mat = self.docs.matrix(ids.tolist())
        return mat

    async def _train_initial(self, counters: Counters) -> None:
        p = self.policy
        schema = train_schema(self._sample(p.initial_samples), self._m(), 0,
                              metric=self.config.metric, iterations=p.iterations, seed=p.seed)
        self.registry.add(schema)
        log.info("trained initial schema v0 on %d samples", min(len(self.docs), p.initial_samples))
        for key, sh in self._shards.items():
            sh.suite = self._make_suite(key)
        # backfill every document written so far, then link them
        for key in self.shard_keys():
            sh = self._shards[key]
            pending = sorted(sh.members)
            await self._index(sh, pending, counters)

    async def requantize(self, counters: Optional[Counters] = None) -> int:
        """Train a warm-started schema on a fresh sample and make it current.

        Existing codes are re-encoded in place (all at once, or in slices of
        ``policy.backfill_batch`` on later mutations). The graph is kept.
        Returns the new schema version.
        """
        if not self.quantized:
            raise ContractError("no schema to refine yet")
        p = self.policy
        parent = self.registry.active
        schema = train_schema(self._sample(p.requantize_samples), parent.m, parent.version + 1,
                              warm_start=parent, iterations=p.iterations, seed=p.seed + 1)
        self.registry.add(schema)
        self.requantized = True
        self._backfill = sorted(self.docs.ids(), reverse=True)
        log.info("re-quantized to v%d; %d codes to refresh", schema.version, len(self._backfill))
        if p.backfill_batch == 0:
            self.backfill_step(len(self._backfill))
        return schema.version

    @property
    def backfill_remaining(self) -> int:
        return len(self._backfill)

    def backfill_step(self, budget: int) -> int:
        """Re-encode up to ``budget`` stale codes with the current schema."""
        schema = self.registry.active
        todo = []
        while self._backfill and len(todo) < budget:
            i = self._backfill.pop()
            if i in self.docs:
                todo.append(i)
        if not todo:
            return 0
        ids, mat = self.docs.matrix(todo)
        codes = encode_batch(mat, schema)
        for doc_id, row in zip(ids.tolist(), codes):
            rec = self.docs.get(doc_id)
            suite = self._shards[self._shard_of(rec)].suite
            suite.quant.put_quantized(suite.context, doc_id, row.tobytes(), schema.version)
        return len(todo)

    async def _lifecycle(self, counters: Counters) -> None:
        p = self.policy
        if not self.uses_quant:
            return
        if not self.quantized and len(self.docs) >= p.initial_samples:
            await self._train_initial(counters)
        if (self.quantized and not self.requantized and p.requantize_at is not None
                and self.inserted_total >= p.requantize_at):
            await self.requantize(counters)
        if self._backfill and p.backfill_batch:
            self.backfill_step(p.backfill_batch)

    # ------------------------------------------------------------- mutation

    async def _index(self, sh: _Shard, ids: Sequence[int], counters: Counters) -> None:
        """Write quantized terms for ``ids`` and link them into the shard's graph."""
        if not ids:
            return
        schema = self.registry.active
        suite = sh.suite
        _, mat = self.docs.matrix(ids)
        order = {i: n for n, i in enumerate(sorted(ids))}
        codes = encode_batch(mat, schema)
        for doc_id in ids:
            suite.quant.put_quantized(suite.context, doc_id, codes[order[doc_id]].tobytes(),
                                      schema.version)
        if self.uses_graph:
            if self.insert_mode == "minibatch":
                step = self.config.minibatch_max
                for s in range(0, len(ids), step):
                    await self.engine.minibatch_insert(suite, ids[s:s + step], counters)
            else:
                for doc_id in ids:
                    await self.engine.insert(suite, doc_id, counters)
        sh.indexed.update(ids)

    async def insert(self, records: Iterable[VectorRecord], counters: Optional[Counters] = None) -> None:
        """Add new documents; ids must not be live."""
        counters = counters if counters is not None else Counters()
        records = list(records)
        seen = set()
        for r in records:
            if r.id in self.docs or r.id in seen:
                raise ContractError(f"id {r.id} is already live")
            seen.add(r.id)
        by_shard: dict[Optional[bytes], list[int]] = {}
        for r in records:
            emb = prepare_embedding(r.embedding, self.config.dimension, self.config.metric)
            key = self._shard_of(r)
            self.docs.put(VectorRecord(r.id, emb, r.shard_key, r.labels))
            self._labels[r.id] = int(r.labels)
            sh = self._shard(key, create=True)
            sh.members.add(r.id)
            by_shard.setdefault(key, []).append(r.id)
        self._touch()
        if self.quantized:
            for key, ids in by_shard.items():
                await self._index(self._shards[key], ids, counters)
        self.inserted_total += len(records)
        await self._lifecycle(counters)
        self.counters.add(counters)

    async def delete(
        self, ids: Iterable[int], policy: str = "drop", counters: Optional[Counters] = None,
    ) -> None:
        """Remove documents; ``policy`` picks how graph edges are repaired."""
        if policy not in DELETE_POLICIES:
            raise ConfigError(f"delete policy must be one of {DELETE_POLICIES}")
        counters = counters if counters is not None else Counters()
        for doc_id in [int(i) for i in ids]:
            rec = self.docs.get(doc_id)
            if rec is None:
                raise NotFoundError(doc_id)
            sh = self._shards[self._shard_of(rec)]
            if doc_id in sh.indexed:
                if self.uses_graph:
                    if policy == "inplace":
                        await self.engine.inplace_delete(sh.suite, doc_id, counters)
                    else:
                        await self.engine.drop_delete(sh.suite, doc_id, counters)
                else:
                    sh.suite.quant.delete_quantized(sh.suite.context, doc_id)
                sh.indexed.discard(doc_id)
            sh.members.discard(doc_id)
            self.docs.delete(doc_id)
            del self._labels[doc_id]
        self._touch()
        await self._lifecycle(counters)
        self.counters.add(counters)

    async def replace(self, records: Iterable[VectorRecord], counters: Optional[Counters] = None) -> None:
        """Overwrite the vectors of live documents and re-link them."""
        counters = counters if counters is not None else Counters()
        for r in records:
            old = self.docs.get(r.id)
            if old is None:
                raise NotFoundError(r.id)
            if self._shard_of(r) != self._shard_of(old):
                raise ContractError("replace cannot move a document to another shard")
            emb = prepare_embedding(r.embedding, self.config.dimension, self.config.metric)
            self.docs.put(VectorRecord(r.id, emb, r.shard_key, r.labels))
            self._labels[r.id] = int(r.labels)
            sh = self._shards[self._shard_of(r)]
            if r.id in sh.indexed:
                schema = self.registry.active
                sh.suite.quant.put_quantized(sh.suite.context, r.id,
                                             encode_batch(emb, schema)[0].tobytes(), schema.version)
                if self.uses_graph:
                    await self.engine.replace(sh.suite, r.id, counters)
        self._touch()
        await self._lifecycle(counters)
        self.counters.add(counters)

    async def consolidate(self, budget: int) -> int:
        """Run one budgeted edge-cleanup pass on every graph; returns lists scanned."""
        if not (self.quantized and self.uses_graph):
            return 0
        scanned = 0
        for key in self.shard_keys():
            sh = self._shards[key]
            scanned += (await self.engine.consolidate_deleted(sh.suite, budget)).scanned
        return scanned


def partition_of(doc_id: int, partitions: int) -> int:
    """Hash partition of a document id."""
    return mmh3.hash(int(doc_id).to_bytes(8, "big"), signed=False) % partitions


class PartitionedCollection:
    """``P`` independent collections; documents are routed by a hash of their id."""

    def __init__(self, partitions: int, config: IndexConfig, **kwargs) -> None:
        if partitions <= 0:
            raise ConfigError("need at least one partition")
        self.config = config
        self.partitions = [Collection(config, **kwargs) for _ in range(partitions)]

    def __len__(self) -> int:
        return sum(len(p) for p in self.partitions)

    def route(self, doc_id: int) -> Collection:
        return self.partitions[partition_of(doc_id, len(self.partitions))]

    async def insert(self, records: Iterable[VectorRecord], counters: Optional[Counters] = None) -> None:
        groups: dict[int, list[VectorRecord]] = {}
        for r in records:
            groups.setdefault(partition_of(r.id, len(self.partitions)), []).append(r)
        for p in sorted(groups):
            await self.partitions[p].insert(groups[p], counters)

    async def delete(self, ids: Iterable[int], policy: str = "drop",
                     counters: Optional[Counters] = None) -> None:
        groups: dict[int, list[int]] = {}
        for i in ids:
            groups.setdefault(partition_of(int(i), len(self.partitions)), []).append(int(i))
        for p in sorted(groups):
            await self.partitions[p].delete(groups[p], policy, counters)
