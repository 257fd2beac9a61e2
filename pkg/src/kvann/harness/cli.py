"""Command-line entry point: ingest, build, query, runbook gen/run and report."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from kvann.core import Counters, IndexConfig, KvannError, LabelFilter, Metric, VectorRecord
from kvann.harness.datasets import (
    DATA_DIR_ENV,
    brute_force_topk,
    dataset_path,
    ingest,
    load_dataset,
    recall_at_k,
    save_dataset,
    synthetic,
)
from kvann.harness.runbook import (
    RUNBOOK_KINDS,
    RecallReport,
    ReplayOptions,
    Runbook,
    generate_runbook,
    run_runbook,
)
from kvann.query import (
    Collection,
    CostReport,
    PlannerConfig,
    QuantizationPolicy,
    VectorQuery,
    load_collection,
    save_collection,
    search,
)

log = logging.getLogger("kvann")


# ---------------------------------------------------------------------------
# shared flags


def _add_index_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("index")
    g.add_argument("--degree-bound", type=int, default=32, help="R, the out-degree bound")
    g.add_argument("--build-list-size", type=int, default=100, help="L_build")
    g.add_argument("--alpha", type=float, default=1.2)
    g.add_argument("--degree-slack", type=float, default=1.3)
    g.add_argument("--minibatch-max", type=int, default=100)
    g.add_argument("--replace-closest", type=int, default=3)
    g.add_argument("--prune-rule", choices=("printed", "rng"), default="printed")
    g.add_argument("--index-kind", choices=("flat", "qflat", "diskann"), default="diskann")
    g.add_argument("--backend", choices=("memory", "store"), default="memory")
    g.add_argument("--insert-mode", choices=("sequential", "minibatch"), default="sequential")
    g.add_argument("--num-subspaces", type=int, default=None, help="PQ code bytes per vector")
    g.add_argument("--initial-samples", type=int, default=1000)
    g.add_argument("--requantize-at", type=int, default=25000, help="negative disables re-quantization")
    g.add_argument("--requantize-samples", type=int, default=25000)
    g.add_argument("--seed", type=int, default=0)


def _add_query_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("query")
    g.add_argument("-k", type=int, default=10)
    g.add_argument("--exact", action="store_true")
    g.add_argument("--search-list-multiplier", type=float, default=10.0)
    g.add_argument("--quant-list-multiplier", type=float, default=7.0)
    g.add_argument("--label-filter", type=int, default=None, help="label bitmap to filter on")
    g.add_argument("--filter-mode", choices=("any", "all", "equal"), default="any")
    g.add_argument("--shard-key", default=None, help="hex shard key")
    g.add_argument("--beta", type=float, default=None)
    g.add_argument("--page-size", type=int, default=None)
    g.add_argument("--max-pages", type=int, default=20)


def _index_config(args, dimension: int, metric: Metric) -> IndexConfig:
    return IndexConfig(
        dimension=dimension,
        metric=metric,
        degree_bound=args.degree_bound,
        build_list_size=args.build_list_size,
        alpha=args.alpha,
        degree_slack=args.degree_slack,
        minibatch_max=args.minibatch_max,
        replace_closest=args.replace_closest,
        prune_rule=args.prune_rule,
    )


def _policy(args) -> QuantizationPolicy:
    return QuantizationPolicy(
        initial_samples=args.initial_samples,
        requantize_at=None if args.requantize_at < 0 else args.requantize_at,
        requantize_samples=args.requantize_samples,
        num_subspaces=args.num_subspaces,
        seed=args.seed,
    )


def _load(name: str):
    path = Path(name)
    return load_dataset(path if path.suffix == ".npz" else dataset_path(name))


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    if args.synthetic:
        ds = synthetic(args.synthetic, args.dim, args.num_queries, args.metric,
                       num_labels=args.labels, seed=args.seed, spectrum_decay=args.spectrum_decay)
    else:
        if not (args.base and args.queries):
            raise KvannError("ingest needs --base and --queries, or --synthetic")
        ds = ingest(args.base, args.queries, args.metric, args.ground_truth, args.name)
    ds.name = args.name
    if ds.ground_truth is None and args.gt_k > 0:
        ds.ground_truth, _ = brute_force_topk(ds.vectors, ds.queries, args.gt_k, ds.metric)
    target = dataset_path(args.name)
    target.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, target)
    print(json.dumps({"dataset": str(target), "vectors": len(ds.vectors), "queries": len(ds.queries),
                      "dimension": ds.dimension, "metric": ds.metric.value}))
    return 0


def _records(ds, limit: Optional[int], sharded: bool) -> list[VectorRecord]:
    n = len(ds.vectors) if limit is None else min(limit, len(ds.vectors))
    labels = ds.labels
    out = []
    for i in range(n):
        lab = int(labels[i]) if labels is not None else 0
        shard = lab.to_bytes(8, "big") if sharded else None
        out.append(VectorRecord(i, ds.vectors[i], shard, lab))
    return out


async def _build(args) -> dict:
    ds = _load(args.dataset)
    cfg = _index_config(args, ds.dimension, ds.metric)
    col = Collection(cfg, index_kind=args.index_kind, backend=args.backend, sharded=args.sharded,
                     policy=_policy(args), insert_mode=args.insert_mode,
                     concurrent=not args.deterministic)
    recs = _records(ds, args.limit, args.sharded)
    counters = Counters()
    t0 = time.perf_counter()
    for s in range(0, len(recs), args.batch):
        await col.insert(recs[s:s + args.batch], counters)
    elapsed = time.perf_counter() - t0
    await save_collection(col, args.index)
    n = max(1, len(recs))
    return {
        "index": args.index,
        "vectors": len(recs),
        "seconds": None if args.deterministic else round(elapsed, 3),
        "schema_version": col.registry.active.version if col.quantized else None,
        "per_insert": {k: round(v / n, 3) for k, v in counters.as_dict().items()},
    }


def cmd_build(args) -> int:
    print(json.dumps(asyncio.run(_build(args)), sort_keys=True))
    return 0


def _vector_query(args, q: np.ndarray) -> VectorQuery:
    filt = None if args.label_filter is None else LabelFilter(args.label_filter, args.filter_mode)
    return VectorQuery(
        q, args.k,
        exact=args.exact,
        search_list_multiplier=args.search_list_multiplier,
        quant_list_multiplier=args.quant_list_multiplier,
        filter=filt,
        shard_key=None if args.shard_key is None else bytes.fromhex(args.shard_key),
        beta=args.beta,
    )


async def _query(args) -> int:
    ds = _load(args.dataset)
    col = await load_collection(args.index, concurrent=not args.deterministic)
    cfg = PlannerConfig(page_size=args.page_size, max_pages=args.max_pages)
    queries = ds.queries if args.num_queries is None else ds.queries[:args.num_queries]
    truth = ds.ground_truth
    unfiltered = args.label_filter is None and args.shard_key is None and len(col) == len(ds.vectors)
    lines, recalls, total = [], [], CostReport()
    for qi, q in enumerate(queries):
        t0 = time.perf_counter()
        res = await search(col, _vector_query(args, q), cfg)
        ms = (time.perf_counter() - t0) * 1000.0
        row = json.loads(res.to_json())
        row["query"] = qi
        row["latency_ms"] = None if args.deterministic else round(ms, 4)
        if args.verbose and res.plan is not None:
            row["plan"] = res.plan.describe()
        if truth is not None and unfiltered:
            row["recall"] = recall_at_k(res.ids, truth[qi], args.k)
            recalls.append(row["recall"])
        total.add(res.cost)
        lines.append(json.dumps(row, sort_keys=True))
    _emit("\n".join(lines) + "\n", args.out)
    nq = max(1, len(queries))
    summary = {"queries": len(queries), "mean_cost": {k: v / nq for k, v in total.as_dict().items()}}
    if recalls:
        summary["recall"] = float(np.mean(recalls))
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return 0


def cmd_query(args) -> int:
    return asyncio.run(_query(args))


def cmd_runbook_gen(args) -> int:
    ds = _load(args.dataset)
    params = {k: v for k, v in {
        "batch_size": args.batch_size,
        "query_interval": args.query_interval,
        "num_clusters": args.num_clusters if args.kind == "clustered" else None,
        "delete_fraction": args.delete_fraction if args.kind == "clustered" else None,
    }.items() if v is not None}
    if args.kind == "expiration_time":
        params["lifetime"] = None if args.lifetime is not None and args.lifetime < 0 else (
            args.lifetime if args.lifetime is not None else 50)
    rb = generate_runbook(args.kind, ds, args.seed, **params)
    _emit(rb.to_json(), args.out)
    return 0


def cmd_runbook_run(args) -> int:
    ds = _load(args.dataset)
    rb = Runbook.from_json(Path(args.runbook).read_text())
    cfg = _index_config(args, ds.dimension, ds.metric)
    opt = ReplayOptions(
        k=args.k,
        search_list_multiplier=args.search_list_multiplier,
        quant_list_multiplier=args.quant_list_multiplier,
        num_queries=args.num_queries,
        policy=_policy(args),
        planner=PlannerConfig(page_size=args.page_size, max_pages=args.max_pages),
        insert_mode=args.insert_mode,
        deterministic=args.deterministic,
    )
    report = run_runbook(rb, ds, cfg, args.policy, opt)
    _emit(report.to_json(), args.out)
    return 0


def cmd_report(args) -> int:
    report = RecallReport.from_json(Path(args.input).read_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    if args.json:
        Path(args.json).write_text(report.to_json())
    if not (args.csv or args.json):
        sys.stdout.write(report.to_csv())
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvann",
        description=f"Graph ANN index over an ordered key-value store. Datasets live in ${DATA_DIR_ENV}.",
    )
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load vector files (or generate data) into the data directory")
    p.add_argument("--name", required=True)
    p.add_argument("--base", help=".fvecs, .bvecs, .fbin or .bin base vectors")
    p.add_argument("--queries")
    p.add_argument("--ground-truth", help=".ivecs ground truth")
    p.add_argument("--metric", choices=[m.value for m in Metric], default="euclidean")
    p.add_argument("--synthetic", type=int, default=0, help="generate this many Gaussian-mixture vectors")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--num-queries", type=int, default=1000)
    p.add_argument("--labels", type=int, default=0, help="distinct labels for synthetic data")
    p.add_argument("--spectrum-decay", type=float, default=1.5)
    p.add_argument("--gt-k", type=int, default=100, help="ground-truth depth computed when absent")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build", help="build a collection and save it")
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", required=True, help="output directory")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--batch", type=int, default=1000, help="records per insert call")
    p.add_argument("--sharded", action="store_true", help="use each vector's label as its shard key")
    p.add_argument("--deterministic", action="store_true")
    _add_index_flags(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", help="query a saved collection; JSON lines out")
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--num-queries", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--verbose", action="store_true", help="include the plan trace")
    p.add_argument("--deterministic", action="store_true")
    _add_query_flags(p)
    p.set_defaults(func=cmd_query)

    rb = sub.add_parser("runbook", help="generate or run streaming runbooks")
    rsub = rb.add_subparsers(dest="runbook_command", required=True)
    p = rsub.add_parser("gen")
    p.add_argument("--dataset", required=True)
    p.add_argument("--kind", choices=RUNBOOK_KINDS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--query-interval", type=int, default=None)
    p.add_argument("--lifetime", type=int, default=None, help="max lifetime in steps; negative = never expire")
    p.add_argument("--num-clusters", type=int, default=None)
    p.add_argument("--delete-fraction", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_runbook_gen)

    p = rsub.add_parser("run")
    p.add_argument("--dataset", required=True)
    p.add_argument("--runbook", required=True)
    p.add_argument("--policy", choices=("drop", "inplace"), default="inplace")
    p.add_argument("--num-queries", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", default=None)
    _add_index_flags(p)
    _add_query_flags(p)
    p.set_defaults(func=cmd_runbook_run, requantize_at=5000, requantize_samples=5000)

    p = sub.add_parser("report", help="convert a recall report to CSV and/or JSON")
    p.add_argument("--input", required=True)
    p.add_argument("--csv", default=None)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KvannError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
