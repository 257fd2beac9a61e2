"""Dataset loading, synthetic generation and the exhaustive ground-truth oracle."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from kvann.core import ConfigError, KvannError, Metric, distances

DATA_DIR_ENV = "KVANN_DATA_DIR"


class ParseError(KvannError):
    """A dataset file is malformed; the message names the byte offset."""


@dataclass
class Dataset:
    """Base vectors, queries and optional ground truth and labels.

    ``labels`` holds one label bitmap per base vector.
    """

    name: str
    dimension: int
    metric: Metric
    vectors: np.ndarray
    queries: np.ndarray
    ground_truth: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.metric = Metric(self.metric)
        for arr in (self.vectors, self.queries):
            if arr.ndim != 2 or arr.shape[1] != self.dimension:
                raise ConfigError(f"dataset {self.name}: expected rows of dimension {self.dimension}")
        if self.ground_truth is not None and len(self.ground_truth) != len(self.queries):
            raise ConfigError("ground truth needs one row per query")


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


# ---------------------------------------------------------------------------
# file formats


def _read_vecs(path: Path, item: str) -> np.ndarray:
    blob = path.read_bytes()
    width = np.dtype(item).itemsize
    rows = []
    pos = 0
    dim = None
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise ParseError(f"{path}: truncated dimension header at byte {pos}")
        (d,) = struct.unpack_from("<i", blob, pos)
        if d <= 0 or (dim is not None and d != dim):
            raise ParseError(f"{path}: bad dimension {d} at byte {pos}")
        dim = d
        end = pos + 4 + d * width
        if end > len(blob):
            raise ParseError(
                f"{path}: vector at byte {pos} needs {d * width} payload bytes, "
                f"only {len(blob) - pos - 4} remain"
            )
        rows.append(np.frombuffer(blob, dtype=item, count=d, offset=pos + 4))
        pos = end
    if not rows:
        return np.empty((0, 0), dtype=item)
    return np.stack(rows)


def read_fvecs(path: str | os.PathLike) -> np.ndarray:
    return _read_vecs(Path(path), "<f4").astype(np.float32)


def read_bvecs(path: str | os.PathLike) -> np.ndarray:
    return _read_vecs(Path(path), "u1").astype(np.float32)


def read_ivecs(path: str | os.PathLike) -> np.ndarray:
    return _read_vecs(Path(path), "<i4").astype(np.int64)


def _write_vecs(path: Path, X: np.ndarray, item: str) -> None:
    X = np.asarray(X)
    with open(path, "wb") as fh:
        for row in X:
            fh.write(struct.pack("<i", len(row)))
            fh.write(np.asarray(row, dtype=item).tobytes())


def write_fvecs(path: str | os.PathLike, X: np.ndarray) -> None:
    _write_vecs(Path(path), X, "<f4")


def write_bvecs(path: str | os.PathLike, X: np.ndarray) -> None:
    _write_vecs(Path(path), X, "u1")


def write_ivecs(path: str | os.PathLike, X: np.ndarray) -> None:
    _write_vecs(Path(path), X, "<i4")


def read_flat(path: str | os.PathLike) -> np.ndarray:
    """Flat binary: ``count u32, dim u32`` then ``count * dim`` little-endian float32."""
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise ParseError(f"{path}: header needs 8 bytes, file has {len(blob)}")
    count, dim = struct.unpack_from("<II", blob, 0)
    expected = 8 + 4 * count * dim
    if len(blob) != expected:
        raise ParseError(
            f"{path}: header at byte 0 declares {count}x{dim} floats, expected {expected} bytes, "
            f"found {len(blob)}"
        )
    return np.frombuffer(blob, dtype="<f4", offset=8).reshape(count, dim).astype(np.float32)


def write_flat(path: str | os.PathLike, X: np.ndarray) -> None:
    X = np.asarray(X, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", X.shape[0], X.shape[1]))
        fh.write(X.tobytes())


_READERS = {".fvecs": read_fvecs, ".bvecs": read_bvecs, ".fbin": read_flat, ".bin": read_flat}


def read_vectors(path: str | os.PathLike) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix not in _READERS:
        raise ParseError(f"{path}: unsupported format {suffix!r}")
    return _READERS[suffix](path)


def ingest(
    base: str | os.PathLike,
    queries: str | os.PathLike,
    metric: Metric | str = Metric.EUCLIDEAN,
    ground_truth: Optional[str | os.PathLike] = None,
    name: Optional[str] = None,
) -> Dataset:
    """Load a dataset from files; dimensions of base and query vectors must agree."""
    X = read_vectors(base)
    Q = read_vectors(queries)
    if X.shape[1] != Q.shape[1]:
        raise ParseError(f"base dimension {X.shape[1]} differs from query dimension {Q.shape[1]}")
    gt = read_ivecs(ground_truth) if ground_truth is not None else None
    return Dataset(name or Path(base).stem, X.shape[1], Metric(metric), X, Q, gt)


def save_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    """Store a dataset as one ``.npz`` archive."""
    arrays = {"vectors": ds.vectors, "queries": ds.queries,
              "info": np.array([ds.name, ds.metric.value])}
    if ds.ground_truth is not None:
        arrays["ground_truth"] = ds.ground_truth
    if ds.labels is not None:
        arrays["labels"] = ds.labels
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_dataset(path: str | os.PathLike) -> Dataset:
    with np.load(Path(path), allow_pickle=False) as z:
        name, metric = (str(x) for x in z["info"])
        X = z["vectors"]
        return Dataset(name, X.shape[1], Metric(metric), X, z["queries"],
                       z["ground_truth"] if "ground_truth" in z else None,
                       z["labels"] if "labels" in z else None)


def dataset_path(name: str) -> Path:
    """Location of a named dataset inside the data directory."""
    return data_dir() / f"{name}.npz"


# ---------------------------------------------------------------------------
# synthetic data


def gaussian_mixture(
    n: int,
    dim: int,
    num_clusters: int = 32,
    spectrum_decay: float = 1.5,
    center_scale: float = 1.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Mixture of anisotropic Gaussians; returns ``(vectors, cluster_labels)``.

    Each cluster has a random orientation and a power-law variance spectrum
    ``j ** -spectrum_decay`` (normalized to mean 1), the shape typical of
    learned embeddings. Larger decays give lower intrinsic dimension.
    """
    rng = np.random.default_rng(seed)
    lam = np.arange(1, dim + 1, dtype=np.float64) ** -spectrum_decay
    scale = np.sqrt(lam / lam.mean())
    centers = rng.standard_normal((num_clusters, dim)) * center_scale
    bases = np.stack([np.linalg.qr(rng.standard_normal((dim, dim)))[0] for _ in range(num_clusters)])
    assign = rng.integers(num_clusters, size=n)
    z = rng.standard_normal((n, dim)) * scale
    X = np.empty((n, dim), dtype=np.float32)
    for c in range(num_clusters):
        sel = assign == c
        X[sel] = centers[c] + z[sel] @ bases[c].T
    return X, assign


def synthetic(
    n: int,
    dim: int,
    num_queries: int,
    metric: Metric | str = Metric.EUCLIDEAN,
    num_labels: int = 0,
    seed: int = 0,
    **mixture,
) -> Dataset:
    """Base and held-out query vectors drawn from the same mixture.

    With ``num_labels > 0`` every base vector gets one uniformly drawn label
    (bitmap ``1 << label``).
    """
    X, _ = gaussian_mixture(n + num_queries, dim, seed=seed, **mixture)
    metric = Metric(metric)
    if metric is Metric.COSINE:
        X /= np.linalg.norm(X, axis=1, keepdims=True)
    labels = None
    if num_labels:
        rng = np.random.default_rng(seed + 1)
        labels = (np.uint64(1) << rng.integers(num_labels, size=n).astype(np.uint64)).astype(np.uint64)
    return Dataset(f"synthetic-{n}x{dim}", dim, metric, X[:n], X[n:], None, labels)


# ---------------------------------------------------------------------------
# exhaustive oracle


def brute_force_topk(
    base: np.ndarray,
    queries: np.ndarray,
    k: int,
    metric: Metric | str = Metric.EUCLIDEAN,
    ids: Optional[np.ndarray] = None,
    chunk: int = 65536,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k per query, ties toward the lower id.

    A BLAS pass shortlists ``k + 32`` candidates per query; the shortlist is
    re-scored with ``kvann.core.distances`` so the reported distances (and
    the order) are those every exact path in the package computes.
    """
    base = np.asarray(base, dtype=np.float32)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float32))
    metric = Metric(metric)
    n = len(base)
    ids = np.arange(n, dtype=np.uint64) if ids is None else np.asarray(ids, dtype=np.uint64)
    k_eff = min(k, n)
    out_ids = np.zeros((len(queries), k_eff), dtype=np.uint64)
    out_d = np.zeros((len(queries), k_eff), dtype=np.float32)
    if n == 0 or k_eff == 0:
        return out_ids, out_d
    short = min(n, k_eff + 32)
    norms = np.einsum("ij,ij->i", base, base) if metric is Metric.EUCLIDEAN else None
    for qs in range(0, len(queries), 256):
        Qb = queries[qs:qs + 256]
        cand_idx = np.empty((len(Qb), 0), dtype=np.int64)
        cand_val = np.empty((len(Qb), 0), dtype=np.float32)
        for start in range(0, n, chunk):
            part = base[start:start + chunk]
            dots = Qb @ part.T
            if metric is Metric.EUCLIDEAN:
                scores = norms[start:start + chunk][None, :] - 2.0 * dots
            else:
                scores = -dots
            take = min(short, scores.shape[1])
            idx = np.argpartition(scores, take - 1, axis=1)[:, :take]
            cand_idx = np.concatenate([cand_idx, idx + start], axis=1)
            cand_val = np.concatenate([cand_val, np.take_along_axis(scores, idx, 1)], axis=1)
            if cand_idx.shape[1] > short:
                keep = np.argpartition(cand_val, short - 1, axis=1)[:, :short]
                cand_idx = np.take_along_axis(cand_idx, keep, 1)
                cand_val = np.take_along_axis(cand_val, keep, 1)
        for r, q in enumerate(Qb):
            rows = cand_idx[r]
            d = distances(q, base[rows], metric)
            order = np.lexsort((ids[rows], d))[:k_eff]
            out_ids[qs + r] = ids[rows[order]]
            out_d[qs + r] = d[order]
    return out_ids, out_d


def recall_at_k(found: np.ndarray, truth: np.ndarray, k: int) -> float:
    """|found[:k] ∩ truth[:k]| / k, or 1.0 when the truth list is empty."""
    truth = list(truth[:k])
    if not truth:
        return 1.0
    return len(set(np.asarray(found[:k]).tolist()) & set(np.asarray(truth).tolist())) / len(truth)
