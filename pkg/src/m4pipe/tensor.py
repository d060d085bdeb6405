"""Radar tensor containers, grid geometry and the RT front-end reshapes.

Arrays are row-major with x outermost and z innermost, i.e. the flat
index of voxel ``(i, j, k)`` is ``(i * ny + j) * nz + k``. Codec and store
bytes depend on this order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BoundsError, CorruptStreamError, InvalidArgumentError, UnsupportedDimensionError

DEFAULT_DIMS = (121, 111, 31)
DEFAULT_ORIGIN = (-3.0, 0.25, 0.0)
DEFAULT_PITCH = (0.05, 0.05, 0.08)
DEFAULT_ROI = (24, 24, 31)
DEFAULT_T = 4

DENSE_MAGIC = b"M4RT"
DENSE_VERSION = 1
# magic, version, dims, origin, pitch; zero padded to 64 bytes
_GEOM_STRUCT = struct.Struct("<4sH3H3f3f")
DENSE_HEADER_SIZE = 64


def _f32(values) -> tuple:
    return tuple(float(v) for v in np.asarray(values, dtype=np.float32))


@dataclass(frozen=True)
class GridGeometry:
    """Voxel grid placement. ``origin`` is the center of voxel (0, 0, 0).

    Origin and pitch are rounded to float32 on construction so that every
    binary format carrying them round-trips exactly.
    """

    dims: tuple = DEFAULT_DIMS
    origin: tuple = DEFAULT_ORIGIN
    pitch: tuple = DEFAULT_PITCH

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise InvalidArgumentError(f"dims must be three positive integers, got {self.dims}")
        if len(self.origin) != 3 or len(self.pitch) != 3:
            raise InvalidArgumentError("origin and pitch need three components")
        if not np.all(np.isfinite(self.origin)):
            raise InvalidArgumentError("origin must be finite")
        if not (np.all(np.isfinite(self.pitch)) and min(self.pitch) > 0):
            raise InvalidArgumentError(f"pitch must be positive, got {self.pitch}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", _f32(self.origin))
        object.__setattr__(self, "pitch", _f32(self.pitch))

    @property
    def size(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        """World coordinates of the first and last voxel centers."""
        o = np.array(self.origin)
        return o, o + (np.array(self.dims) - 1) * np.array(self.pitch)

    def contains(self, p) -> bool:
        lo, hi = self.extent()
        half = 0.5 * np.array(self.pitch)
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= lo - half) and np.all(p <= hi + half))

    def voxel_to_world(self, idx) -> np.ndarray:
        idx = tuple(int(i) for i in idx)
        if any(i < 0 or i >= n for i, n in zip(idx, self.dims)):
            raise BoundsError(f"voxel index {idx} outside dims {self.dims}")
        return np.array(self.origin) + np.array(idx) * np.array(self.pitch)

    def world_to_voxel(self, p, clip: bool = False) -> tuple:
        """Nearest voxel index; out-of-grid points raise unless ``clip``."""
        p = np.asarray(p, dtype=np.float64)
        f = (p - np.array(self.origin)) / np.array(self.pitch)
        idx = np.floor(f + 0.5).astype(np.int64)
        if clip:
            idx = np.clip(idx, 0, np.array(self.dims) - 1)
        elif np.any(idx < 0) or np.any(idx >= np.array(self.dims)):
            raise BoundsError(f"point {p.tolist()} falls outside the grid")
        return tuple(int(i) for i in idx)

    def linear_index(self, idx) -> int:
        i, j, k = idx
        _, ny, nz = self.dims
        return (int(i) * ny + int(j)) * nz + int(k)

    def voxel_centers(self, idx: np.ndarray) -> np.ndarray:
        """Vectorised world positions for an ``(N, 3)`` integer index array."""
        return np.asarray(self.origin) + np.asarray(idx, dtype=np.float64) * np.asarray(self.pitch)

    def header_bytes(self, magic: bytes, version: int) -> bytes:
        if max(self.dims) > 0xFFFF:
            raise UnsupportedDimensionError(f"dims {self.dims} do not fit in u16")
        return _GEOM_STRUCT.pack(magic, version, *self.dims, *self.origin, *self.pitch)

    @classmethod
    def from_header_bytes(cls, buf: bytes, magic: bytes, versions=(1,)) -> tuple["GridGeometry", int]:
        if len(buf) < _GEOM_STRUCT.size:
            raise CorruptStreamError("stream shorter than geometry header", len(buf))
        got, version, nx, ny, nz, *rest = _GEOM_STRUCT.unpack_from(buf, 0)
        if got != magic:
            raise CorruptStreamError(f"bad magic {got!r}, expected {magic!r}", 0)
        if version not in versions:
            raise CorruptStreamError(f"unsupported version {version}", 4)
        try:
            geom = cls((nx, ny, nz), tuple(rest[:3]), tuple(rest[3:]))
        except InvalidArgumentError as exc:
            raise CorruptStreamError(f"invalid geometry in header: {exc}", 6) from None
        return geom, version


@dataclass(frozen=True, eq=False)
class RadarTensor:
    """Dense non-negative intensity volume on a grid (float32 values)."""

    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32, order="C", copy=True)
        if v.shape != self.geometry.dims:
            raise InvalidArgumentError(f"values shape {v.shape} != dims {self.geometry.dims}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("tensor values must be finite")
        if np.any(v < 0):
            raise InvalidArgumentError("tensor values must be non-negative")
        v += np.float32(0.0)  # -0.0 -> +0.0 so nonzero tests and bytes agree
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, geometry: GridGeometry | None = None) -> "RadarTensor":
        geometry = geometry or GridGeometry()
        return cls(geometry, np.zeros(geometry.dims, dtype=np.float32))

    def __eq__(self, other):
        if not isinstance(other, RadarTensor):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.values, other.values)

    __hash__ = None

    def to_dense_bytes(self) -> bytes:
        """Debug dump: 64-byte "M4RT" header then little-endian f32 voxels."""
        header = self.geometry.header_bytes(DENSE_MAGIC, DENSE_VERSION)
        header = header.ljust(DENSE_HEADER_SIZE, b"\0")
        return header + self.values.astype("<f4").tobytes()

    @classmethod
    def from_dense_bytes(cls, buf: bytes) -> "RadarTensor":
        geom, _ = GridGeometry.from_header_bytes(buf, DENSE_MAGIC)
        expected = DENSE_HEADER_SIZE + 4 * geom.size
        if len(buf) != expected:
            raise CorruptStreamError(f"dense dump has {len(buf)} bytes, expected {expected}", min(len(buf), expected))
        vals = np.frombuffer(buf, dtype="<f4", offset=DENSE_HEADER_SIZE).reshape(geom.dims)
        try:
            return cls(geom, vals)
        except InvalidArgumentError as exc:
            raise CorruptStreamError(str(exc), DENSE_HEADER_SIZE) from None


@dataclass(frozen=True, eq=False)
class RadarPointCloud:
    """Detections as ``(N, 3)`` world positions and ``(N,)`` intensities."""

    positions: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        inten = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
        if len(pos) != len(inten):
            raise InvalidArgumentError("positions and intensities differ in length")
        if not (np.all(np.isfinite(inten)) and np.all(inten >= 0)):
            raise InvalidArgumentError("intensities must be finite and non-negative")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "intensities", inten)

    @classmethod
    def empty(cls) -> "RadarPointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0))

    def __len__(self):
        return len(self.intensities)

    def as_array(self) -> np.ndarray:
        """``(N, 4)`` rows of ``(x, y, z, intensity)``."""
        return np.column_stack([self.positions, self.intensities])


@dataclass(frozen=True)
class FrameStack:
    """``T`` consecutive tensors on one grid, oldest first."""

    frames: tuple

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise InvalidArgumentError("a frame stack needs at least one frame")
        g = frames[0].geometry
        if any(f.geometry != g for f in frames[1:]):
            raise InvalidArgumentError("all frames in a stack must share one geometry")
        object.__setattr__(self, "frames", frames)

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def geometry(self) -> GridGeometry:
        return self.frames[0].geometry


@dataclass(frozen=True, eq=False)
class BevMap:
    """Bird's-eye view: ``channels[i, j, k + t * nz]`` = frame t, voxel (i, j, k)."""

    geometry: GridGeometry
    channels: np.ndarray
    T: int


def bev_collapse(stack: FrameStack) -> BevMap:
    if not isinstance(stack, FrameStack):
        stack = FrameStack(tuple(stack))
    channels = np.concatenate([f.values for f in stack.frames], axis=2)
    return BevMap(stack.geometry, channels, stack.T)


def bev_expand(bev: BevMap) -> FrameStack:
    """Exact inverse of :func:`bev_collapse`."""
    nz = bev.geometry.dims[2]
    return FrameStack(
        tuple(RadarTensor(bev.geometry, bev.channels[:, :, t * nz:(t + 1) * nz]) for t in range(bev.T))
    )


def crop_window(geometry: GridGeometry, center_xy, roi=DEFAULT_ROI) -> tuple:
    """Start index (may be negative) of the RoI window for a BEV center."""
    cx, cy = (float(c) for c in center_xy)
    if not (np.isfinite(cx) and np.isfinite(cy)):
        raise InvalidArgumentError("crop center must be finite")
    dx, dy, dz = (int(r) for r in roi)
    nz = geometry.dims[2]
    if min(dx, dy, dz) <= 0:
        raise InvalidArgumentError(f"RoI dims must be positive, got {roi}")
    if dz > nz:
        raise InvalidArgumentError(f"RoI depth {dz} exceeds grid depth {nz}")
    ci = int(np.floor((cx - geometry.origin[0]) / geometry.pitch[0] + 0.5))
    cj = int(np.floor((cy - geometry.origin[1]) / geometry.pitch[1] + 0.5))
    return (ci - dx // 2, cj - dy // 2, (nz - dz) // 2)


def _crop_values(values: np.ndarray, start, roi) -> np.ndarray:
    out = np.zeros(tuple(roi), dtype=np.float32)
    src_lo = [max(0, s) for s in start]
    src_hi = [min(n, s + r) for s, r, n in zip(start, roi, values.shape)]
    if all(h > l for l, h in zip(src_lo, src_hi)):
        dst = tuple(slice(l - s, h - s) for l, h, s in zip(src_lo, src_hi, start))
        src = tuple(slice(l, h) for l, h in zip(src_lo, src_hi))
        out[dst] = values[src]
    return out


def crop_roi(stack: FrameStack, center_xy, roi=DEFAULT_ROI) -> FrameStack:
    """Fixed-size 3D RoI around the voxel nearest ``center_xy``; zero padded."""
    g = stack.geometry
    start = crop_window(g, center_xy, roi)
    origin = tuple(np.asarray(g.origin, dtype=np.float64) + np.array(start) * np.asarray(g.pitch, dtype=np.float64))
    sub = GridGeometry(tuple(int(r) for r in roi), origin, g.pitch)
    return FrameStack(tuple(RadarTensor(sub, _crop_values(f.values, start, roi)) for f in stack.frames))


def stack_window(frames: Sequence[RadarTensor], t: int, T: int = DEFAULT_T) -> FrameStack:
    """Frames ``t-T+1 .. t``; indices before the start repeat frame 0."""
    if len(frames) == 0:
        raise InvalidArgumentError("cannot stack an empty frame sequence")
    if T < 1:
        raise InvalidArgumentError("T must be positive")
    if t < 0 or t >= len(frames):
        raise BoundsError(f"frame index {t} outside sequence of length {len(frames)}")
    return FrameStack(tuple(frames[max(0, i)] for i in range(t - T + 1, t + 1)))
