"""Write-once single-file key/value store ("M4DB"), one file per modality.

A reader maps the file, validates header and index checksums once, then
serves ``get`` with a binary search over the in-memory key list followed by
one slice of the mapped data region at ``data_offset + offset``.

Layout (little-endian unless noted)::

    header (64 bytes)
      0   4s   magic "M4DB"
      4   u16  version (1)
      6   u16  reserved
      8   16s  modality tag, NUL padded
      24  u64  entry count
      32  u64  data region offset (64)
      40  u64  data region size
      48  u64  index region offset
      56  u32  reserved
      60  u32  CRC32 of bytes 0..59
    data region: value blobs concatenated in key order
    index region: count x 32-byte entries
      key    8 bytes big-endian (subject u16, action u16, frame u32)
      offset u64, length u64 (relative to the data region)
      crc    u32 CRC32 of the 8 key bytes followed by the blob, then 4 reserved bytes
    footer (8 bytes): u32 CRC32 of the index region, magic "M4DE"
"""

from __future__ import annotations

import mmap
import os
import random
import struct
import tempfile
import time
import zlib
from bisect import bisect_left
from dataclasses import dataclass
from functools import total_ordering
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import InvalidArgumentError, KeyNotFoundError, StoreBuildError, StoreCorruptError

MAGIC = b"M4DB"
FOOTER_MAGIC = b"M4DE"
VERSION = 1
HEADER = struct.Struct("<4sHH16sQQQQII")
HEADER_SIZE = HEADER.size
FOOTER = struct.Struct("<I4s")
INDEX_DTYPE = np.dtype([("key", ">u8"), ("offset", "<u8"), ("length", "<u8"), ("crc", "<u4"), ("pad", "<u4")])
assert HEADER_SIZE == 64 and INDEX_DTYPE.itemsize == 32


@total_ordering
@dataclass(frozen=True)
class SampleKey:
    subject: int
    action: int
    frame: int

    def __post_init__(self):
        for name, bits in (("subject", 16), ("action", 16), ("frame", 32)):
            v = getattr(self, name)
            if not (0 <= int(v) < (1 << bits)):
                raise InvalidArgumentError(f"{name} {v} does not fit in u{bits}")
            object.__setattr__(self, name, int(v))

    def packed(self) -> int:
        """Key as an integer whose order equals (subject, action, frame) order."""
        return (self.subject << 48) | (self.action << 32) | self.frame

    @classmethod
    def unpack(cls, k: int) -> "SampleKey":
        k = int(k)
        return cls(k >> 48, (k >> 32) & 0xFFFF, k & 0xFFFFFFFF)

    def __lt__(self, other):
        return self.packed() < other.packed()

    def __str__(self):
        return f"({self.subject}, {self.action}, {self.frame})"


def _entry_crc(packed_key: int, blob) -> int:
    # binding the key into the checksum means a rewritten index entry cannot
    # hand back another sample's bytes
    return zlib.crc32(blob, zlib.crc32(packed_key.to_bytes(8, "big")))


def build(path, entries: Iterable[tuple[SampleKey, bytes]], modality: str = "rt") -> Path:
    """Write a store; entries may arrive in any order, keys must be unique."""
    path = Path(path)
    tag = modality.encode("ascii")
    if len(tag) > 16:
        raise InvalidArgumentError("modality tag is limited to 16 bytes")
    path.parent.mkdir(parents=True, exist_ok=True)
    # spill blobs in arrival order, then copy them out in key order
    with tempfile.TemporaryFile(dir=path.parent) as spill:
        spans = {}
        pos = 0
        for key, blob in entries:
            k = key.packed()
            if k in spans:
                raise StoreBuildError(f"duplicate key {key}")
            blob = bytes(blob)
            spill.write(blob)
            spans[k] = (pos, len(blob))
            pos += len(blob)
        order = sorted(spans)
        index = np.zeros(len(order), dtype=INDEX_DTYPE)
        tmp = path.with_name(path.name + ".partial")
        with open(tmp, "wb") as out:
            try:
                out.write(b"\0" * HEADER_SIZE)
                data_off = 0
                for n, k in enumerate(order):
                    src, length = spans[k]
                    spill.seek(src)
                    blob = spill.read(length)
                    out.write(blob)
                    index[n] = (k, data_off, length, _entry_crc(k, blob), 0)
                    data_off += length
                index_bytes = index.tobytes()
                out.write(index_bytes)
                out.write(FOOTER.pack(zlib.crc32(index_bytes), FOOTER_MAGIC))
                head = HEADER.pack(MAGIC, VERSION, 0, tag, len(order), HEADER_SIZE, data_off,
                                   HEADER_SIZE + data_off, 0, 0)
                head = head[:60] + struct.pack("<I", zlib.crc32(head[:60]))
                out.seek(0)
                out.write(head)
            except OSError as exc:
                raise OSError(f"writing {tmp} failed at byte {out.tell()}: {exc}") from exc
        os.replace(tmp, path)
    return path


class Store:
    """Read-only view of an M4DB file. Safe to share across threads."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "rb")
        size = os.fstat(self._fh.fileno()).st_size
        if size < HEADER_SIZE + FOOTER.size:
            self._fh.close()
            raise StoreCorruptError(f"{self.path}: file too small to be a store", size)
        self._mm = mmap.mmap(self._fh.fileno(), 0, access=mmap.ACCESS_READ)
        try:
            self._validate(size)
        except Exception:
            self.close()
            raise

    def _validate(self, size: int):
        mm = self._mm
        magic, version, _, tag, count, data_off, data_size, index_off, _, hcrc = HEADER.unpack_from(mm, 0)
        if magic != MAGIC:
            raise StoreCorruptError(f"{self.path}: bad magic {magic!r}", 0)
        if zlib.crc32(mm[:60]) != hcrc:
            raise StoreCorruptError(f"{self.path}: header checksum mismatch", 60)
        if version != VERSION:
            raise StoreCorruptError(f"{self.path}: unsupported version {version}", 4)
        index_len = count * INDEX_DTYPE.itemsize
        if (data_off != HEADER_SIZE or index_off != data_off + data_size
                or index_off + index_len + FOOTER.size != size):
            raise StoreCorruptError(f"{self.path}: header offsets inconsistent with file size {size}", 24)
        icrc, fmagic = FOOTER.unpack_from(mm, index_off + index_len)
        if fmagic != FOOTER_MAGIC:
            raise StoreCorruptError(f"{self.path}: bad footer magic", index_off + index_len + 4)
        if zlib.crc32(mm[index_off:index_off + index_len]) != icrc:
            raise StoreCorruptError(f"{self.path}: index checksum mismatch", index_off)
        index = np.frombuffer(mm, dtype=INDEX_DTYPE, count=count, offset=index_off)
        keys = index["key"].astype(np.uint64)
        off = index["offset"].astype(np.uint64)
        length = index["length"].astype(np.uint64)
        if count:
            if count > 1 and np.any(keys[1:] <= keys[:-1]):
                raise StoreCorruptError(f"{self.path}: index keys not strictly increasing", index_off)
            end = off + length
            if np.any(end > data_size) or np.any(end < off):
                raise StoreCorruptError(f"{self.path}: index entry points past the data region", index_off)
            if count > 1 and np.any(off[1:] < end[:-1]):
                raise StoreCorruptError(f"{self.path}: overlapping index entries", index_off)
        self.modality = tag.rstrip(b"\0").decode("ascii", "replace")
        self._data_off = data_off
        self._keys = [int(k) for k in keys]
        self._offsets = [int(o) for o in off]
        self._lengths = [int(n) for n in length]
        self._crcs = [int(c) for c in index["crc"]]

    def close(self):
        if getattr(self, "_mm", None) is not None:
            self._mm.close()
            self._mm = None
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __len__(self):
        return len(self._keys)

    def __contains__(self, key: SampleKey):
        k = key.packed()
        i = bisect_left(self._keys, k)
        return i < len(self._keys) and self._keys[i] == k

    def keys(self) -> list:
        return [SampleKey.unpack(k) for k in self._keys]

    def _read(self, i: int) -> bytes:
        start = self._data_off + self._offsets[i]
        blob = self._mm[start:start + self._lengths[i]]
        if _entry_crc(self._keys[i], blob) != self._crcs[i]:
            raise StoreCorruptError(f"{self.path}: blob checksum mismatch for {SampleKey.unpack(self._keys[i])}", start)
        return blob

    def get(self, key: SampleKey) -> bytes:
        k = key.packed()
        i = bisect_left(self._keys, k)
        if i == len(self._keys) or self._keys[i] != k:
            raise KeyNotFoundError(f"key {key} not in {self.path.name}")
        return self._read(i)

    def scan(self, subject: int | None = None, action: int | None = None) -> Iterator[tuple[SampleKey, bytes]]:
        """Entries in key order, optionally restricted to a subject and/or action."""
        if subject is None:
            lo, hi = 0, len(self._keys)
        else:
            base = SampleKey(subject, 0, 0).packed()
            lo = bisect_left(self._keys, base)
            hi = bisect_left(self._keys, base + (1 << 48))
        for i in range(lo, hi):
            key = SampleKey.unpack(self._keys[i])
            if action is not None and key.action != action:
                continue
            yield key, self._read(i)


def open_store(path) -> Store:
    return Store(path)


# --------------------------------------------------------------------------
# per-file baseline and benchmark


def baseline_path(root, key: SampleKey) -> Path:
    return Path(root) / f"S{key.subject:03d}" / f"A{key.action:03d}" / f"{key.frame:06d}.bin"


def write_baseline_tree(root, entries: Iterable[tuple[SampleKey, bytes]]) -> Path:
    """One file per sample under ``root/Sxxx/Axxx/ffffff.bin``."""
    root = Path(root)
    for key, blob in entries:
        p = baseline_path(root, key)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(blob)
    return root


@dataclass
class AccessStats:
    lookups_per_s: float
    bytes_per_s: float
    lookups: int
    seconds: float


@dataclass
class BenchResult:
    store_cold: AccessStats
    store_warm: AccessStats
    files_cold: AccessStats
    files_warm: AccessStats

    def rows(self):
        for name in ("store_cold", "store_warm", "files_cold", "files_warm"):
            s = getattr(self, name)
            yield name, s


def _timed(fn, keys) -> AccessStats:
    total = 0
    t0 = time.perf_counter()
    for k in keys:
        total += len(fn(k))
    dt = max(time.perf_counter() - t0, 1e-9)
    return AccessStats(len(keys) / dt, total / dt, len(keys), dt)


def _read_file(root, key):
    with open(baseline_path(root, key), "rb") as fh:
        return fh.read()


def bench_access(store_path, baseline_root, keys=None, n: int = 10000, seed: int = 0) -> BenchResult:
    """Random-access throughput of a store vs. the per-file tree, cold then warm."""
    with Store(store_path) as s:
        all_keys = s.keys()
    if keys is None:
        rng = random.Random(seed)
        keys = [rng.choice(all_keys) for _ in range(n)] if all_keys else []
    keys = list(keys)
    with Store(store_path) as s:
        store_cold = _timed(s.get, keys)
        store_warm = _timed(s.get, keys)
    files_cold = _timed(lambda k: _read_file(baseline_root, k), keys)
    files_warm = _timed(lambda k: _read_file(baseline_root, k), keys)
    return BenchResult(store_cold, store_warm, files_cold, files_warm)
