"""Small-graph fixtures shared by the test modules."""

from __future__ import annotations

import asyncio
from collections import deque

import numpy as np

from kvann.core import Counters, IndexConfig, VectorRecord
from kvann.graph import DocumentVectors, GraphEngine, MemoryBackend, ProviderSuite, StoreBackend
from kvann.quantization import PqSchema, SchemaRegistry, encode_batch, train_schema
from kvann.storage import DocumentStore, OrderedStore, terms


def run(coro):
    return asyncio.run(coro)


def exact_schema(X: np.ndarray, version: int = 0) -> PqSchema:
    """One subspace per coordinate and one centroid per point: codes decode exactly.

    Needs at most 256 points.
    """
    X = np.asarray(X, dtype=np.float32)
    assert len(X) <= 256
    cents = np.concatenate([X, np.repeat(X[-1:], 256 - len(X), axis=0)])
    return PqSchema(version, (1,) * X.shape[1], cents)


class Graph:
    """A graph engine wired to one in-memory (or store-backed) logical index."""

    def __init__(self, X, config: IndexConfig, schema: PqSchema | None = None, m: int = 8,
                 backend: str = "memory", use_kernels: bool = True, concurrent: bool = True):
        self.X = np.asarray(X, dtype=np.float32)
        self.config = config
        if schema is None:
            schema = train_schema(self.X, m, 0, iterations=10, seed=0)
        self.registry = SchemaRegistry([schema])
        self.docs = DocumentStore(self.X.shape[1])
        if backend == "memory":
            be = MemoryBackend(schema.m, config.max_degree)
        else:
            be = StoreBackend(OrderedStore(classify=terms.classify))
        self.backend = be
        self.suite = ProviderSuite(be, DocumentVectors(self.docs), be, be)
        self.engine = GraphEngine(config, self.registry, use_kernels=use_kernels, concurrent=concurrent)
        self.codes = encode_batch(self.X, schema)
        self.counters = Counters()

    def write(self, ids) -> None:
        """Store documents and quantized terms (the insert precondition)."""
        schema = self.registry.active
        for i in ids:
            i = int(i)
            self.docs.put(VectorRecord(i, self.X[i]))
            self.suite.quant.put_quantized(self.suite.context, i, self.codes[i].tobytes(), schema.version)

    def insert_all(self, ids=None, batch: int = 0) -> "Graph":
        ids = list(range(len(self.X))) if ids is None else [int(i) for i in ids]
        self.write(ids)

        async def go():
            if batch:
                for s in range(0, len(ids), batch):
                    await self.engine.minibatch_insert(self.suite, ids[s:s + batch], self.counters)
            else:
                for i in ids:
                    await self.engine.insert(self.suite, i, self.counters)
        run(go())
        return self

    def out(self, v: int) -> list[int]:
        nb = self.suite.neighbors.get_neighbors(self.suite.context, int(v))
        return [] if nb is None else [int(x) for x in nb]

    def meta(self):
        return self.suite.meta.load_meta(self.suite.context)

    def live(self) -> list[int]:
        return [int(i) for i in self.suite.quant.scan_quantized(self.suite.context).ids]

    def adjacency(self) -> dict[int, list[int]]:
        rows = self.suite.neighbors.scan_neighbors(self.suite.context, None, 10**9)
        return {int(v): [int(x) for x in nb] for v, nb in rows}

    def reachable(self) -> set[int]:
        start = self.meta().start
        if start is None:
            return set()
        live = set(self.live())
        seen = {start}
        todo = deque([start])
        while todo:
            v = todo.popleft()
            for w in self.out(v):
                if w in live and w not in seen:
                    seen.add(w)
                    todo.append(w)
        return seen

    def search(self, q, k: int, L: int):
        return run(self.engine.greedy_search(self.suite, q, k, L))


def clustered_points(n: int, dim: int, seed: int = 0) -> np.ndarray:
    from kvann.harness.datasets import gaussian_mixture
    X, _ = gaussian_mixture(n, dim, num_clusters=8, seed=seed)
    return X
