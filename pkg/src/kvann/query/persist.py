"""Saving a collection to a directory and loading it back.

Index terms are exported through the provider interfaces, so the format is
the same for both backends.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from kvann.core import ConfigError, IndexConfig
from kvann.graph import GraphMeta, NeighborOp, NeighborPatch, resolve
from kvann.quantization import PqSchema
from kvann.query.collection import Collection, QuantizationPolicy, _Shard
from kvann.storage import DocumentStore

FORMAT = 1
_SCAN_CHUNK = 4096


async def save_collection(col: Collection, directory: str | Path) -> None:
    """Write documents, schemas and every logical index of ``col`` under ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    col.docs.save(out / "docs.npz")
    shard_keys = col.shard_keys()
    manifest = {
        "format": FORMAT,
        "config": dataclasses.asdict(col.config) | {"metric": col.config.metric.value},
        "index_kind": col.index_kind,
        "backend": col.backend,
        "sharded": col.sharded,
        "insert_mode": col.insert_mode,
        "path": col.path,
        "policy": dataclasses.asdict(col.policy),
        "inserted_total": col.inserted_total,
        "requantized": col.requantized,
        "active_schema": col.registry.active.version if len(col.registry) else None,
        "schemas": [s.to_bytes().hex() for s in col.registry],
        "backfill": list(col._backfill),
        "shards": [None if k is None else k.hex() for k in shard_keys],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))
    for n, key in enumerate(shard_keys):
        suite = col.suite(key)
        if suite is None:
            continue
        quant = await resolve(suite.quant.scan_quantized(suite.context))
        owners, flat, offsets = [], [], [0]
        after = None
        while True:
            rows = await resolve(suite.neighbors.scan_neighbors(suite.context, after, _SCAN_CHUNK))
            if not rows:
                break
            for doc_id, nbrs in rows:
                owners.append(doc_id)
                flat.extend(int(x) for x in nbrs)
                offsets.append(len(flat))
            after = rows[-1][0]
        meta = await resolve(suite.meta.load_meta(suite.context))
        np.savez(
            out / f"shard_{n}.npz",
            quant_ids=quant.ids,
            codes=quant.codes,
            versions=quant.versions,
            owners=np.array(owners, dtype=np.uint64),
            neighbors=np.array(flat, dtype=np.uint64),
            offsets=np.array(offsets, dtype=np.int64),
            meta=np.frombuffer(meta.to_bytes(), dtype=np.uint8),
        )


async def load_collection(directory: str | Path, concurrent: bool = True) -> Collection:
    """Rebuild a collection saved by :func:`save_collection`."""
    src = Path(directory)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest.get("format") != FORMAT:
        raise ConfigError(f"{src}: unsupported collection format {manifest.get('format')}")
    col = Collection(
        IndexConfig(**manifest["config"]),
        index_kind=manifest["index_kind"],
        backend=manifest["backend"],
        sharded=manifest["sharded"],
        policy=QuantizationPolicy(**manifest["policy"]),
        insert_mode=manifest["insert_mode"],
        path=manifest["path"],
        concurrent=concurrent,
    )
    col.docs = DocumentStore.load(src / "docs.npz")
    col._vectors.docs = col.docs
    for blob in manifest["schemas"]:
        col.registry.add(PqSchema.from_bytes(bytes.fromhex(blob)), make_current=False)
    col.registry.current = manifest["active_schema"]
    col.inserted_total = manifest["inserted_total"]
    col.requantized = manifest["requantized"]
    col._backfill = list(manifest["backfill"])
    for rec in col.docs.records():
        col._labels[rec.id] = int(rec.labels)
    keys = [None if k is None else bytes.fromhex(k) for k in manifest["shards"]]
    for key in keys:
        col._shards[key] = _Shard(None)
    for rec in col.docs.records():
        col._shards[col._shard_of(rec)].members.add(rec.id)
    for n, key in enumerate(keys):
        path = src / f"shard_{n}.npz"
        if not path.exists():
            continue
        sh = col._shards[key]
        sh.suite = col._make_suite(key)
        suite = sh.suite
        with np.load(path) as z:
            for doc_id, row, ver in zip(z["quant_ids"].tolist(), z["codes"], z["versions"].tolist()):
                suite.quant.put_quantized(suite.context, doc_id, row.tobytes(), ver)
            owners, flat, offsets = z["owners"].tolist(), z["neighbors"].tolist(), z["offsets"]
            patches = [(o, NeighborPatch(NeighborOp.OVERWRITE, tuple(flat[offsets[i]:offsets[i + 1]])))
                       for i, o in enumerate(owners)]
            if patches:
                await resolve(suite.neighbors.apply_neighbor_patches(suite.context, patches))
            await resolve(suite.meta.store_meta(suite.context, GraphMeta.from_bytes(z["meta"].tobytes())))
            sh.indexed = set(z["quant_ids"].tolist())
    col._touch()
    return col
