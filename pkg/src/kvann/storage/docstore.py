"""Full-precision document store (the main store for documents)."""

from __future__ import annotations

import json
import os
import threading
from collections import Counter
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from kvann.core import NotFoundError, VectorRecord


class DocumentStore:
    """Map from document id to ``VectorRecord``; every fetch is counted."""

    def __init__(self, dimension: int) -> None:
        self.dimension = dimension
        self._docs: dict[int, VectorRecord] = {}
        self._lock = threading.RLock()
        self.counters: Counter = Counter()

    def __len__(self) -> int:
        return len(self._docs)

    def __contains__(self, doc_id: int) -> bool:
        return int(doc_id) in self._docs

    def ids(self) -> list[int]:
        return sorted(self._docs)

    def put(self, record: VectorRecord) -> None:
        with self._lock:
            self._docs[record.id] = record
            self.counters["doc_put"] += 1

    def delete(self, doc_id: int) -> None:
        with self._lock:
            if self._docs.pop(int(doc_id), None) is None:
                raise NotFoundError(doc_id)
            self.counters["doc_delete"] += 1

    def get(self, doc_id: int) -> Optional[VectorRecord]:
        self.counters["doc_fetch"] += 1
        return self._docs.get(int(doc_id))

    def fetch_vectors(self, ids: Iterable[int]) -> tuple[np.ndarray, np.ndarray]:
        """Vectors for ``ids`` as a matrix plus a found-mask (missing rows are zero)."""
        ids = [int(i) for i in ids]
        out = np.zeros((len(ids), self.dimension), dtype=np.float32)
        found = np.zeros(len(ids), dtype=bool)
        for row, i in enumerate(ids):
            rec = self._docs.get(i)
            if rec is not None:
                out[row] = rec.embedding
                found[row] = True
        self.counters["doc_fetch"] += len(ids)
        return out, found

    def records(self) -> Iterator[VectorRecord]:
        for i in sorted(self._docs):
            yield self._docs[i]

    def matrix(self, ids: Optional[Iterable[int]] = None) -> tuple[np.ndarray, np.ndarray]:
        """All (or selected) live ids ascending with their vectors; counted as fetches."""
        chosen = sorted(self._docs) if ids is None else sorted(int(i) for i in ids if int(i) in self._docs)
        if not chosen:
            return np.empty(0, dtype=np.uint64), np.empty((0, self.dimension), dtype=np.float32)
        self.counters["doc_fetch"] += len(chosen)
        mat = np.stack([self._docs[i].embedding for i in chosen])
        return np.array(chosen, dtype=np.uint64), mat

    def save(self, path: str | os.PathLike) -> None:
        recs = list(self.records())
        shard = [None if r.shard_key is None else r.shard_key.hex() for r in recs]
        np.savez(
            path,
            ids=np.array([r.id for r in recs], dtype=np.uint64),
            vectors=(np.stack([r.embedding for r in recs]) if recs
                     else np.empty((0, self.dimension), np.float32)),
            labels=np.array([str(r.labels) for r in recs]),
            shards=np.array([json.dumps(shard)]),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DocumentStore":
        with np.load(Path(path), allow_pickle=False) as z:
            vectors = z["vectors"]
            store = cls(vectors.shape[1])
            shards = json.loads(str(z["shards"][0]))
            for i, v, lab, sh in zip(z["ids"], vectors, z["labels"], shards):
                store._docs[int(i)] = VectorRecord(
                    int(i), v, None if sh is None else bytes.fromhex(sh), int(str(lab))
                )
        return store
