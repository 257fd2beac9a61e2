"""Streaming workloads: runbook generation, replay against a collection, recall reports."""

from __future__ import annotations

import asyncio
import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from kvann.core import Counters, IndexConfig, KvannError, VectorRecord
from kvann.harness.datasets import Dataset, brute_force_topk, recall_at_k
from kvann.quantization import kmeans
from kvann.query import Collection, CostReport, PlannerConfig, QuantizationPolicy, VectorQuery, search

RUNBOOK_KINDS = ("expiration_time", "clustered")
STEP_OPS = ("insert", "delete", "replace", "query")


class RunbookError(KvannError):
    """Replay stopped at a step; ``step`` is its index in the runbook."""

    def __init__(self, step: int, message: str) -> None:
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class Step:
    op: str
    ids: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.op not in STEP_OPS:
            raise KvannError(f"unknown runbook op {self.op!r}")


@dataclass
class Runbook:
    """An ordered insert/delete/replace/query script over the ids of a dataset."""

    kind: str
    seed: int
    steps: list[Step]
    params: dict = field(default_factory=dict)

    @property
    def query_steps(self) -> int:
        return sum(1 for s in self.steps if s.op == "query")

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "seed": self.seed,
            "params": self.params,
            "steps": [[s.op, list(s.ids)] for s in self.steps],
        }, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Runbook":
        raw = json.loads(text)
        steps = [Step(op, tuple(int(i) for i in ids)) for op, ids in raw["steps"]]
        return cls(raw["kind"], int(raw["seed"]), steps, raw.get("params", {}))

    def replay_live(self) -> list[set[int]]:
        """Live id set at every query step (the oracle replay)."""
        live: set[int] = set()
        out = []
        for s in self.steps:
            if s.op == "insert":
                live.update(s.ids)
            elif s.op == "delete":
                live.difference_update(s.ids)
            elif s.op == "query":
                out.append(set(live))
        return out


# ---------------------------------------------------------------------------
# generation


def _expiration_time(n: int, rng: np.random.Generator, batch_size: int, lifetime: Optional[int],
                     query_interval: int) -> list[Step]:
    steps: list[Step] = []
    expiry: dict[int, list[int]] = {}
    order = rng.permutation(n)
    rounds = math.ceil(n / batch_size)
    for t in range(rounds):
        batch = sorted(int(i) for i in order[t * batch_size:(t + 1) * batch_size])
        steps.append(Step("insert", tuple(batch)))
        if lifetime is not None:
            lo = max(1, lifetime // 4)
            lives = rng.integers(lo, lifetime + 1, size=len(batch))
            for doc_id, life in zip(batch, lives.tolist()):
                expiry.setdefault(t + life, []).append(doc_id)
        due = expiry.pop(t, None)
        if due:
            steps.append(Step("delete", tuple(sorted(due))))
        if (t + 1) % query_interval == 0 or t == rounds - 1:
            steps.append(Step("query"))
    return steps


def cluster_labels(vectors: np.ndarray, num_clusters: int, seed: int) -> np.ndarray:
    """k-means cluster label per vector, deterministic in ``seed``."""
    C = kmeans(vectors, num_clusters, seed=seed).astype(np.float32)
    X = np.asarray(vectors, dtype=np.float32)
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.argmin(d, axis=1)


def _clustered(vectors: np.ndarray, rng: np.random.Generator, seed: int, num_clusters: int,
               batch_size: int, delete_fraction: float, query_interval: int) -> list[Step]:
    labels = cluster_labels(vectors, num_clusters, seed)
    steps: list[Step] = []
    live_by_cluster: dict[int, list[int]] = {}
    mutations = 0
    for c in range(num_clusters):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(len(members))]
        for s in range(0, len(members), batch_size):
            steps.append(Step("insert", tuple(sorted(int(i) for i in members[s:s + batch_size]))))
            mutations += 1
            if mutations % query_interval == 0:
                steps.append(Step("query"))
        live_by_cluster[c] = sorted(int(i) for i in members)
        if c > 0 and delete_fraction > 0:
            # thin out the previous cluster once the next one has arrived
            prev = live_by_cluster[c - 1]
            cut = int(round(delete_fraction * len(prev)))
            gone = sorted(rng.choice(prev, size=cut, replace=False).tolist()) if cut else []
            if gone:
                steps.append(Step("delete", tuple(gone)))
                mutations += 1
                live_by_cluster[c - 1] = sorted(set(prev) - set(gone))
                if mutations % query_interval == 0:
                    steps.append(Step("query"))
    if not steps or steps[-1].op != "query":
        steps.append(Step("query"))
    return steps


def generate_runbook(kind: str, dataset: Dataset, seed: int = 0, **params) -> Runbook:
    """Build a deterministic runbook over ``dataset``'s base vectors.

    expiration_time params:
        batch_size: points inserted per step (default ``n // 100``).
        lifetime: maximum lifetime in steps; each point lives a uniform
            integer number of steps in ``[lifetime // 4, lifetime]``.
            ``None`` means points never expire.
        query_interval: insert steps between query checkpoints.

    clustered params:
        num_clusters: defaults to ``min(32, isqrt(n))``.
        batch_size, query_interval: as above (interval counts mutations).
        delete_fraction: share of the previous cluster deleted once the next
            cluster is fully inserted.
    """
    n = len(dataset.vectors)
    rng = np.random.default_rng(seed)
    if kind == "expiration_time":
        p = {"batch_size": max(1, n // 100), "lifetime": 50, "query_interval": 5}
        p.update(params)
        steps = _expiration_time(n, rng, p["batch_size"], p["lifetime"], p["query_interval"])
    elif kind == "clustered":
        p = {"num_clusters": min(32, math.isqrt(n)), "batch_size": max(1, n // 100),
             "delete_fraction": 0.5, "query_interval": 5}
        p.update(params)
        steps = _clustered(dataset.vectors, rng, seed, p["num_clusters"], p["batch_size"],
                           p["delete_fraction"], p["query_interval"])
    else:
        raise KvannError(f"runbook kind must be one of {RUNBOOK_KINDS}")
    return Runbook(kind, seed, steps, p)


# ---------------------------------------------------------------------------
# reports


REPORT_COLUMNS = ("step", "live", "recall", "p50_ms", "p95_ms", "p99_ms",
                  "quant_reads", "adj_reads", "fullprec_reads")


@dataclass
class Checkpoint:
    """One query step: mean recall@k, latency percentiles and mean reads per query."""

    step: int
    live: int
    recall: float
    p50_ms: Optional[float]
    p95_ms: Optional[float]
    p99_ms: Optional[float]
    quant_reads: float
    adj_reads: float
    fullprec_reads: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.recall <= 1.0:
            raise KvannError(f"recall {self.recall} outside [0, 1]")


@dataclass
class RecallReport:
    policy: str
    kind: str = ""
    k: int = 10
    checkpoints: list[Checkpoint] = field(default_factory=list)

    @property
    def recalls(self) -> list[float]:
        return [c.recall for c in self.checkpoints]

    @property
    def mean_recall(self) -> float:
        return float(np.mean(self.recalls)) if self.checkpoints else 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RecallReport":
        raw = json.loads(text)
        cps = [Checkpoint(**c) for c in raw.pop("checkpoints")]
        return cls(checkpoints=cps, **raw)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for c in self.checkpoints:
            row = asdict(c)
            w.writerow(["" if row[col] is None else row[col] for col in REPORT_COLUMNS])
        return buf.getvalue()


def _percentiles(lat_ms: list[float]) -> tuple[Optional[float], ...]:
    if not lat_ms:
        return None, None, None
    p = np.percentile(np.asarray(lat_ms), [50, 95, 99])
    return tuple(round(float(x), 4) for x in p)


# ---------------------------------------------------------------------------
# replay


@dataclass
class ReplayOptions:
    """How a runbook is replayed.

    ``deterministic`` disables concurrency and leaves latency unreported so
    two runs produce identical reports.
    """

    k: int = 10
    search_list_multiplier: float = 10.0
    quant_list_multiplier: float = 7.0
    num_queries: Optional[int] = None
    policy: QuantizationPolicy = field(default_factory=lambda: QuantizationPolicy(requantize_at=5000,
                                                                                  requantize_samples=5000))
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    insert_mode: str = "sequential"
    deterministic: bool = False
    check_live: bool = True


async def replay(runbook: Runbook, dataset: Dataset, config: IndexConfig, delete_policy: str = "inplace",
                 options: Optional[ReplayOptions] = None) -> RecallReport:
    """Stream a runbook through a collection and measure recall at each query step."""
    opt = options or ReplayOptions()
    col = Collection(config, policy=opt.policy, insert_mode=opt.insert_mode,
                     concurrent=not opt.deterministic)
    queries = dataset.queries if opt.num_queries is None else dataset.queries[:opt.num_queries]
    labels = dataset.labels
    report = RecallReport(delete_policy, runbook.kind, opt.k)
    live: set[int] = set()
    for idx, s in enumerate(runbook.steps):
        try:
            if s.op == "insert":
                await col.insert([VectorRecord(i, dataset.vectors[i], None,
                                               int(labels[i]) if labels is not None else 0) for i in s.ids])
                live.update(s.ids)
            elif s.op == "replace":
                await col.replace([VectorRecord(i, dataset.vectors[i]) for i in s.ids])
            elif s.op == "delete":
                await col.delete(s.ids, delete_policy)
                live.difference_update(s.ids)
            else:
                report.checkpoints.append(await _checkpoint(col, idx, live, dataset, queries, opt))
        except KvannError as exc:
            if isinstance(exc, RunbookError):
                raise
            raise RunbookError(idx, str(exc)) from exc
    return report


async def _checkpoint(col: Collection, idx: int, live: set[int], dataset: Dataset, queries: np.ndarray,
                      opt: ReplayOptions) -> Checkpoint:
    if opt.check_live:
        held = set(col.docs.ids())
        if held != live:
            raise RunbookError(idx, f"collection holds {len(held)} ids, replay expects {len(live)}")
        if col.quantized:
            indexed = set((await col.graph_live_ids()).tolist())
            if indexed != live:
                raise RunbookError(idx, "index terms disagree with the replayed live set")
    ids = np.array(sorted(live), dtype=np.uint64)
    truth, _ = brute_force_topk(dataset.vectors[ids.astype(np.int64)], queries, opt.k,
                                dataset.metric, ids=ids)
    recalls, lat, cost = [], [], CostReport()
    for qi, q in enumerate(queries):
        vq = VectorQuery(q, opt.k, search_list_multiplier=opt.search_list_multiplier,
                         quant_list_multiplier=opt.quant_list_multiplier)
        t0 = time.perf_counter()
        res = await search(col, vq, opt.planner)
        lat.append((time.perf_counter() - t0) * 1000.0)
        recalls.append(recall_at_k(res.ids, truth[qi], opt.k))
        cost.add(res.cost)
    nq = max(1, len(queries))
    p50, p95, p99 = (None, None, None) if opt.deterministic else _percentiles(lat)
    return Checkpoint(idx, len(live), round(float(np.mean(recalls)) if recalls else 1.0, 6), p50, p95, p99,
                      round(cost.quant_reads / nq, 3), round(cost.adj_reads / nq, 3),
                      round(cost.fullprec_reads / nq, 3))


def run_runbook(runbook: Runbook, dataset: Dataset, config: IndexConfig, delete_policy: str = "inplace",
                options: Optional[ReplayOptions] = None) -> RecallReport:
    """Synchronous wrapper around :func:`replay`."""
    return asyncio.run(replay(runbook, dataset, config, delete_policy, options))
