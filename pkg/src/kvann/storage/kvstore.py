"""In-memory ordered key-value store with log-structured delta chains.

Every mutation is a blind patch appended to the key's chain: ``APPEND`` (adds
fixed-size items, merged by concatenation), ``OVERWRITE`` or ``DELETE``. Reads
replay the chain over the base value; once a chain grows past
``max_chain_length`` it is consolidated into a new base.
"""

from __future__ import annotations

import csv
import os
import struct
import threading
import zlib
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

from sortedcontainers import SortedDict

from kvann.core import KvannError

DEFAULT_MAX_CHAIN = 15

_SNAP_MAGIC = b"KVSNAP01"
_SNAP_FORMAT = 1


class ContractViolation(KvannError):
    """A patch broke the store's contract (duplicate append, delete of a missing key)."""


class SnapshotError(KvannError):
    """A snapshot file is corrupt or truncated."""


class PatchKind(IntEnum):
    APPEND = 1
    OVERWRITE = 2
    DELETE = 3


@dataclass(frozen=True)
class Patch:
    kind: PatchKind
    value: bytes = b""

    @classmethod
    def append(cls, value: bytes) -> "Patch":
        return cls(PatchKind.APPEND, bytes(value))

    @classmethod
    def overwrite(cls, value: bytes) -> "Patch":
        return cls(PatchKind.OVERWRITE, bytes(value))

    @classmethod
    def delete(cls) -> "Patch":
        return cls(PatchKind.DELETE)


@dataclass
class _Entry:
    base: Optional[bytes]
    chain: list[Patch] = field(default_factory=list)


def replay(base: Optional[bytes], chain: Iterable[Patch]) -> Optional[bytes]:
    """Logical value of ``base`` after applying ``chain`` in order."""
    value = base
    for p in chain:
        if p.kind is PatchKind.APPEND:
            value = (value or b"") + p.value
        elif p.kind is PatchKind.OVERWRITE:
            value = p.value
        else:
            value = None
    return value


class OrderedStore:
    """Byte-ordered key-value store with blind patches and prefix seeks.

    Args:
        max_chain_length: pending patches a key may hold before consolidation.
        item_size: width of the items an ``APPEND`` patch carries; used to
            enforce the no-duplicate-append contract.
        classify: maps a key to a counter label (e.g. ``"quant"``); reads are
            counted per label.
    """

    def __init__(
        self,
        max_chain_length: int = DEFAULT_MAX_CHAIN,
        item_size: int = 8,
        classify: Optional[Callable[[bytes], str]] = None,
    ) -> None:
        self.max_chain_length = max_chain_length
        self.item_size = item_size
        self._classify = classify or (lambda key: "term")
        self._data: SortedDict = SortedDict()
        self._lock = threading.RLock()
        self.counters: Counter = Counter()

    # -- reads -------------------------------------------------------------

    def __len__(self) -> int:
        return sum(1 for _ in self.prefix_seek(b"", count=False))

    def get(self, key: bytes) -> Optional[bytes]:
        with self._lock:
            self.counters[self._classify(key) + "_get"] += 1
            entry = self._data.get(key)
            if entry is None:
                return None
            return replay(entry.base, entry.chain)

    def chain_length(self, key: bytes) -> int:
        entry = self._data.get(key)
        return 0 if entry is None else len(entry.chain)

    def prefix_seek(self, prefix: bytes, count: bool = True) -> Iterator[tuple[bytes, bytes]]:
        """Yield ``(key, value)`` for every live key starting with ``prefix``, ascending."""
        return self.range_seek(prefix, None, prefix=prefix, count=count)

    def range_seek(
        self,
        lo: bytes,
        hi: Optional[bytes],
        prefix: bytes = b"",
        count: bool = True,
        limit: Optional[int] = None,
    ) -> Iterator[tuple[bytes, bytes]]:
        """Yield live entries with ``lo <= key < hi`` (and starting with ``prefix``).

        At most ``limit`` entries are returned when it is given.
        """
        with self._lock:
            items = []
            for key in self._data.irange(minimum=lo, maximum=hi, inclusive=(True, False)):
                if not key.startswith(prefix) or (limit is not None and len(items) >= limit):
                    break
                entry = self._data[key]
                value = replay(entry.base, entry.chain)
                if value is not None:
                    items.append((key, value))
            if count:
                for key, _ in items:
                    self.counters[self._classify(key) + "_scan"] += 1
        return iter(items)

    def first_with_prefix(self, prefix: bytes) -> Optional[tuple[bytes, bytes]]:
        """Cheapest prefix seek: the first live entry under ``prefix`` or None."""
        with self._lock:
            for key in self._data.irange(minimum=prefix):
                if not key.startswith(prefix):
                    return None
                entry = self._data[key]
                value = replay(entry.base, entry.chain)
                if value is not None:
                    self.counters[self._classify(key) + "_get"] += 1
                    return key, value
            return None

    # -- writes ------------------------------------------------------------

    def put_patch(self, key: bytes, patch: Patch) -> None:
        self.apply_batch([(key, patch)])

    def put(self, key: bytes, value: bytes) -> None:
        self.put_patch(key, Patch.overwrite(value))

    def delete(self, key: bytes) -> None:
        self.put_patch(key, Patch.delete())

    def apply_batch(self, patches: Iterable[tuple[bytes, Patch]]) -> None:
        """Apply patches atomically: all are validated before any becomes visible."""
        patches = list(patches)
        with self._lock:
            self._validate(patches)
            for key, patch in patches:
                entry = self._data.get(key)
                if entry is None:
                    entry = self._data[key] = _Entry(None)
                entry.chain.append(patch)
                self.counters["patches"] += 1
                if len(entry.chain) > self.max_chain_length:
                    self._consolidate_key(key)

    def _validate(self, patches: list[tuple[bytes, Patch]]) -> None:
        exists: dict[bytes, bool] = {}
        pending: dict[bytes, set[bytes]] = {}
        for key, patch in patches:
            if key not in exists:
                entry = self._data.get(key)
                exists[key] = entry is not None and replay(entry.base, entry.chain) is not None
                pending[key] = set()
                if entry is not None:
                    for p in entry.chain:
                        if p.kind is PatchKind.APPEND:
                            pending[key].update(self._items(p.value))
                        else:
                            pending[key].clear()
            if patch.kind is PatchKind.DELETE:
                if not exists[key]:
                    raise ContractViolation(f"delete patch for missing key {key.hex()}")
                exists[key] = False
                pending[key].clear()
            elif patch.kind is PatchKind.OVERWRITE:
                exists[key] = True
                pending[key].clear()
            else:
                if len(patch.value) % self.item_size:
                    raise ContractViolation("append payload is not a whole number of items")
                items = self._items(patch.value)
                if len(set(items)) != len(items) or pending[key].intersection(items):
                    raise ContractViolation(f"duplicate append for key {key.hex()}")
                pending[key].update(items)
                exists[key] = True

    def _items(self, value: bytes) -> list[bytes]:
        n = self.item_size
        return [value[i:i + n] for i in range(0, len(value), n)]

    # -- consolidation -----------------------------------------------------

    def _consolidate_key(self, key: bytes) -> None:
        entry = self._data[key]
        value = replay(entry.base, entry.chain)
        self.counters["consolidations"] += 1
        if value is None:
            del self._data[key]
        else:
            entry.base = value
            entry.chain = []

    def consolidate(self, key: Optional[bytes] = None) -> None:
        """Fold pending chains into base values (one key, or every key)."""
        with self._lock:
            keys = [key] if key is not None else list(self._data.keys())
            for k in keys:
                if k in self._data and self._data[k].chain:
                    self._consolidate_key(k)

    # -- persistence -------------------------------------------------------

    def snapshot(self, path: str | os.PathLike) -> None:
        """Write every live key with its consolidated value to ``path``."""
        with self._lock:
            items = list(self.range_seek(b"", None, count=False))
        body = bytearray(struct.pack("<IQ", _SNAP_FORMAT, len(items)))
        for key, value in items:
            body += struct.pack("<I", len(key)) + key + struct.pack("<I", len(value)) + value
        blob = _SNAP_MAGIC + bytes(body)
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))
        os.replace(tmp, path)

    def restore(self, path: str | os.PathLike) -> None:
        """Replace this store's contents with a snapshot; on error nothing changes."""
        data = load_snapshot(path)
        with self._lock:
            self._data = data

    @classmethod
    def from_snapshot(cls, path: str | os.PathLike, **kwargs) -> "OrderedStore":
        store = cls(**kwargs)
        store.restore(path)
        return store

    def dump_counters(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["counter_name", "value"])
            for name in sorted(self.counters):
                writer.writerow([name, self.counters[name]])


def load_snapshot(path: str | os.PathLike) -> SortedDict:
    blob = Path(path).read_bytes()
    if len(blob) < len(_SNAP_MAGIC) + 16:
        raise SnapshotError(f"snapshot {path} is truncated ({len(blob)} bytes)")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if not payload.startswith(_SNAP_MAGIC):
        raise SnapshotError(f"{path} is not a store snapshot")
    if zlib.crc32(payload) != crc:
        raise SnapshotError(f"snapshot {path} failed its checksum")
    pos = len(_SNAP_MAGIC)
    fmt, count = struct.unpack_from("<IQ", payload, pos)
    if fmt != _SNAP_FORMAT:
        raise SnapshotError(f"unsupported snapshot format {fmt}")
    pos += 12
    data = SortedDict()
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", payload, pos)
            key = payload[pos + 4:pos + 4 + klen]
            pos += 4 + klen
            (vlen,) = struct.unpack_from("<I", payload, pos)
            value = payload[pos + 4:pos + 4 + vlen]
            pos += 4 + vlen
            if len(key) != klen or len(value) != vlen:
                raise SnapshotError("entry runs past the end of the snapshot")
            data[bytes(key)] = _Entry(bytes(value))
    except struct.error as exc:
        raise SnapshotError(f"snapshot {path} is truncated at byte {pos}") from exc
    if pos != len(payload):
        raise SnapshotError(f"snapshot {path} has {len(payload) - pos} trailing bytes")
    return data
