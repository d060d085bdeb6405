"""Lossless sparse encoding of radar tensors ("M4SP" streams).

Only nonzero voxels are written, as 10-byte records ``(i, j, k, value)``
sorted by linear voxel index. Layout (little-endian)::

    0   4s   magic "M4SP"
    4   u16  version (1)
    6   3u16 dims
    12  3f32 origin
    24  3f32 pitch
    36  12x  reserved, zero
    48  u32  record count
    52  u32  CRC32 over header (this field zeroed) + records
    56  8x   reserved, zero
    64  records: u16 i, u16 j, u16 k, f32 intensity

See docs/formats.md for the full description.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import CorruptStreamError, UnsupportedDimensionError
from .tensor import GridGeometry, RadarTensor

MAGIC = b"M4SP"
VERSION = 1
HEADER_SIZE = 64
RECORD_SIZE = 10
_COUNT_OFFSET = 48
_CRC_OFFSET = 52
_TAIL = struct.Struct("<II")

RECORD_DTYPE = np.dtype([("i", "<u2"), ("j", "<u2"), ("k", "<u2"), ("v", "<f4")])
assert RECORD_DTYPE.itemsize == RECORD_SIZE


def _checksum(header: bytes, payload: bytes) -> int:
    blank = header[:_CRC_OFFSET] + b"\0\0\0\0" + header[_CRC_OFFSET + 4:]
    return zlib.crc32(payload, zlib.crc32(blank)) & 0xFFFFFFFF


def encode(t: RadarTensor) -> bytes:
    g = t.geometry
    if max(g.dims) > 0xFFFF:
        raise UnsupportedDimensionError(f"dims {g.dims} exceed the u16 index range")
    flat = t.values.reshape(-1)
    nz = np.flatnonzero(flat)
    recs = np.empty(len(nz), dtype=RECORD_DTYPE)
    i, j, k = np.unravel_index(nz, g.dims)
    recs["i"], recs["j"], recs["k"] = i, j, k
    recs["v"] = flat[nz]
    payload = recs.tobytes()

    head = bytearray(g.header_bytes(MAGIC, VERSION).ljust(_COUNT_OFFSET, b"\0"))
    head += _TAIL.pack(len(nz), 0)
    head = head.ljust(HEADER_SIZE, b"\0")
    struct.pack_into("<I", head, _CRC_OFFSET, _checksum(bytes(head), payload))
    return bytes(head) + payload


def read_header(buf) -> tuple[GridGeometry, int]:
    """Geometry and record count, with length/count consistency checked."""
    buf = memoryview(buf)
    geom, _ = GridGeometry.from_header_bytes(bytes(buf[:HEADER_SIZE]), MAGIC)
    if len(buf) < HEADER_SIZE:
        raise CorruptStreamError("truncated header", len(buf))
    count, _ = _TAIL.unpack_from(buf, _COUNT_OFFSET)
    expected = HEADER_SIZE + RECORD_SIZE * count
    if len(buf) < expected:
        raise CorruptStreamError(f"truncated stream: {count} records need {expected} bytes, got {len(buf)}", len(buf))
    if len(buf) > expected:
        raise CorruptStreamError("trailing bytes after last record", expected)
    return geom, count


def decode(buf) -> RadarTensor:
    buf = bytes(buf)
    geom, count = read_header(buf)
    head, payload = buf[:HEADER_SIZE], buf[HEADER_SIZE:]
    stored = struct.unpack_from("<I", head, _CRC_OFFSET)[0]
    if _checksum(head, payload) != stored:
        raise CorruptStreamError("checksum mismatch", _CRC_OFFSET)

    recs = np.frombuffer(payload, dtype=RECORD_DTYPE, count=count)
    idx = np.stack([recs["i"], recs["j"], recs["k"]], axis=1).astype(np.int64)
    bad = np.flatnonzero(np.any(idx >= np.array(geom.dims), axis=1))
    if len(bad):
        raise CorruptStreamError(f"record {bad[0]} index {tuple(idx[bad[0]])} outside dims {geom.dims}",
                                 HEADER_SIZE + RECORD_SIZE * int(bad[0]))
    lin = np.ravel_multi_index(tuple(idx.T), geom.dims) if count else np.zeros(0, np.int64)
    bad = np.flatnonzero(np.diff(lin) <= 0)
    if len(bad):
        r = int(bad[0]) + 1
        raise CorruptStreamError(f"record {r} breaks strictly increasing voxel order", HEADER_SIZE + RECORD_SIZE * r)
    vals = recs["v"]
    bad = np.flatnonzero(~(np.isfinite(vals) & (vals > 0)))
    if len(bad):
        r = int(bad[0])
        raise CorruptStreamError(f"record {r} has invalid intensity {vals[r]!r}", HEADER_SIZE + RECORD_SIZE * r + 6)

    dense = np.zeros(geom.size, dtype=np.float32)
    dense[lin] = vals
    return RadarTensor(geom, dense.reshape(geom.dims))


def encoded_size(nnz: int) -> int:
    return HEADER_SIZE + RECORD_SIZE * nnz


def compression_ratio(t: RadarTensor) -> float:
    """Dense float32 byte size over encoded byte size."""
    nnz = int(np.count_nonzero(t.values))
    return 4.0 * t.geometry.size / encoded_size(nnz)
