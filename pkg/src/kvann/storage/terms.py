"""Byte layout of index terms.

Quantized term::

    path_prefix(16) | 0x17 | [shard_prefix(8)] | doc_id(8, big-endian) | version(1) | codes(m)

value: a constant dummy marker.

Adjacency term::

    path_prefix(16) | 0x18 | [shard_prefix(8)] | doc_id(8, big-endian)

value: out-neighbor ids, 8 bytes each (little-endian).

Graph metadata lives under ``path_prefix | 0x19 | [shard_prefix]``.
"""

from __future__ import annotations

import struct
from typing import Optional

import mmh3
import numpy as np

from kvann.core import ConfigError

QUANT_MARKER = 0x17
ADJACENCY_MARKER = 0x18
META_MARKER = 0x19

PATH_PREFIX_LEN = 16
SHARD_PREFIX_LEN = 8
ID_LEN = 8

DUMMY_VALUE = b"\x01"

_ID = struct.Struct(">Q")


def path_prefix(path: str) -> bytes:
    """16-byte murmur3 hash of the indexed property path."""
    return mmh3.hash_bytes(path.encode("utf-8"))


def shard_prefix(shard_key: bytes | str) -> bytes:
    if isinstance(shard_key, str):
        shard_key = shard_key.encode("utf-8")
    return mmh3.hash_bytes(bytes(shard_key))[:SHARD_PREFIX_LEN]


def _head(prefix: bytes, marker: int, shard: Optional[bytes]) -> bytes:
    if len(prefix) != PATH_PREFIX_LEN:
        raise ConfigError(f"path prefix must be {PATH_PREFIX_LEN} bytes")
    if shard is not None and len(shard) != SHARD_PREFIX_LEN:
        raise ConfigError(f"shard prefix must be {SHARD_PREFIX_LEN} bytes")
    return prefix + bytes([marker]) + (shard or b"")


def quant_range(prefix: bytes, shard: Optional[bytes] = None) -> bytes:
    """Key prefix shared by every quantized term of one logical index."""
    return _head(prefix, QUANT_MARKER, shard)


def adjacency_range(prefix: bytes, shard: Optional[bytes] = None) -> bytes:
    return _head(prefix, ADJACENCY_MARKER, shard)


def meta_key(prefix: bytes, shard: Optional[bytes] = None) -> bytes:
    return _head(prefix, META_MARKER, shard)


def quant_id_prefix(prefix: bytes, shard: Optional[bytes], doc_id: int) -> bytes:
    return quant_range(prefix, shard) + _ID.pack(doc_id)


def encode_quant_term(
    prefix: bytes, shard: Optional[bytes], doc_id: int, codes: bytes, version: int
) -> tuple[bytes, bytes]:
    if not codes:
        raise ConfigError("quantized vector must be non-empty")
    if not 0 <= version < 256:
        raise ConfigError("schema version must fit in one byte inside a term")
    key = quant_id_prefix(prefix, shard, doc_id) + bytes([version]) + bytes(codes)
    return key, DUMMY_VALUE


def decode_quant_term(key: bytes, sharded: bool) -> tuple[bytes, Optional[bytes], int, int, bytes]:
    """Inverse of ``encode_quant_term``: (prefix, shard, id, version, codes)."""
    prefix, shard, pos = _decode_head(key, QUANT_MARKER, sharded)
    (doc_id,) = _ID.unpack_from(key, pos)
    pos += ID_LEN
    if len(key) < pos + 2:
        raise ConfigError("quantized term has no code bytes")
    return prefix, shard, doc_id, key[pos], key[pos + 1:]


def encode_adjacency_term(prefix: bytes, shard: Optional[bytes], doc_id: int) -> bytes:
    return adjacency_range(prefix, shard) + _ID.pack(doc_id)


def decode_adjacency_term(key: bytes, sharded: bool) -> tuple[bytes, Optional[bytes], int]:
    prefix, shard, pos = _decode_head(key, ADJACENCY_MARKER, sharded)
    if len(key) != pos + ID_LEN:
        raise ConfigError("adjacency term key has the wrong length")
    return prefix, shard, _ID.unpack_from(key, pos)[0]


def _decode_head(key: bytes, marker: int, sharded: bool) -> tuple[bytes, Optional[bytes], int]:
    pos = PATH_PREFIX_LEN
    if len(key) < pos + 1 + ID_LEN or key[pos] != marker:
        raise ConfigError(f"not a term with marker 0x{marker:02x}")
    pos += 1
    shard = None
    if sharded:
        shard = key[pos:pos + SHARD_PREFIX_LEN]
        pos += SHARD_PREFIX_LEN
    return key[:PATH_PREFIX_LEN], shard, pos


def encode_neighbors(ids) -> bytes:
    return np.asarray(ids, dtype="<u8").tobytes()


def decode_neighbors(value: Optional[bytes]) -> np.ndarray:
    if not value:
        return np.empty(0, dtype=np.uint64)
    if len(value) % ID_LEN:
        raise ConfigError("adjacency value is not a whole number of ids")
    return np.frombuffer(value, dtype="<u8").astype(np.uint64)


def classify(key: bytes) -> str:
    """Counter label for a key, used by ``OrderedStore`` instrumentation."""
    if len(key) > PATH_PREFIX_LEN:
        marker = key[PATH_PREFIX_LEN]
        if marker == QUANT_MARKER:
            return "quant"
        if marker == ADJACENCY_MARKER:
            return "adj"
        if marker == META_MARKER:
            return "meta"
    return "other"
