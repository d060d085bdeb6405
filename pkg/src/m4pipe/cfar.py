"""Cell-averaging CFAR over 3D radar tensors.

For a cell under test ``v`` the training ring is every in-grid cell within
``train`` voxels of ``v`` (Chebyshev box, per axis) that is not within
``guard`` voxels. ``v`` is detected when

    value(v) >= threshold_factor * mean(ring)  and  value(v) >= min_intensity

with one exception: if the ring mean is exactly zero, ``v`` is detected iff
``value(v) > 0``.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import CorruptStreamError, InvalidArgumentError
from .tensor import RadarPointCloud, RadarTensor


@dataclass(frozen=True)
class CfarConfig:
    guard: tuple = (2, 2, 1)
    train: tuple = (5, 5, 2)
    threshold_factor: float = 3.0
    min_intensity: float = 0.0
    max_points: int = 1000

    def __post_init__(self):
        guard = tuple(int(g) for g in self.guard)
        train = tuple(int(t) for t in self.train)
        if len(guard) != 3 or len(train) != 3:
            raise InvalidArgumentError("guard and train need three components")
        if min(guard) < 0:
            raise InvalidArgumentError("guard half-widths must be >= 0")
        if any(t <= g for t, g in zip(train, guard)):
            raise InvalidArgumentError(f"training window {train} must exceed guard {guard} on every axis")
        if not (np.isfinite(self.threshold_factor) and self.threshold_factor > 0):
            raise InvalidArgumentError("threshold_factor must be > 0")
        if not (np.isfinite(self.min_intensity) and self.min_intensity >= 0):
            raise InvalidArgumentError("min_intensity must be >= 0")
        if int(self.max_points) < 1:
            raise InvalidArgumentError("max_points must be >= 1")
        object.__setattr__(self, "guard", guard)
        object.__setattr__(self, "train", train)
        object.__setattr__(self, "threshold_factor", float(self.threshold_factor))
        object.__setattr__(self, "min_intensity", float(self.min_intensity))
        object.__setattr__(self, "max_points", int(self.max_points))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["guard"], d["train"] = list(self.guard), list(self.train)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CfarConfig":
        unknown = set(d) - {"guard", "train", "threshold_factor", "min_intensity", "max_points"}
        if unknown:
            raise InvalidArgumentError(f"unknown CFAR config keys: {sorted(unknown)}")
        return cls(**d)


def _box_sum(a: np.ndarray, half: tuple) -> np.ndarray:
    # separable sums; cells outside the grid contribute zero
    out = a
    for axis, h in enumerate(half):
        out = ndimage.correlate1d(out, np.ones(2 * h + 1), axis=axis, mode="constant", cval=0.0)
    return out


def detection_mask(t: RadarTensor, c: CfarConfig) -> np.ndarray:
    """Boolean array of detected voxels, before sorting and truncation."""
    v = t.values.astype(np.float64)
    ones = np.ones_like(v)
    nonzero = (v != 0).astype(np.float64)

    ring_sum = _box_sum(v, c.train) - _box_sum(v, c.guard)
    ring_cells = _box_sum(ones, c.train) - _box_sum(ones, c.guard)
    ring_nonzero = _box_sum(nonzero, c.train) - _box_sum(nonzero, c.guard)

    # counts are exact integers; a ring with no nonzero cell has mean exactly 0
    zero_mean = ring_nonzero < 0.5
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(zero_mean, 0.0, np.maximum(ring_sum, 0.0) / np.maximum(ring_cells, 1.0))
    hit = np.where(zero_mean, v > 0, v >= c.threshold_factor * mean)
    return hit & (v >= c.min_intensity)


def cfar_detect(t: RadarTensor, c: CfarConfig | None = None) -> RadarPointCloud:
    """Detections sorted by intensity (descending, ties by voxel index)."""
    c = c or CfarConfig()
    mask = detection_mask(t, c)
    lin = np.flatnonzero(mask.reshape(-1))
    vals = t.values.reshape(-1)[lin].astype(np.float64)
    order = np.lexsort((lin, -vals))[: c.max_points]
    lin, vals = lin[order], vals[order]
    idx = np.stack(np.unravel_index(lin, t.geometry.dims), axis=1)
    return RadarPointCloud(t.geometry.voxel_centers(idx), vals)


def pad_points(p: RadarPointCloud, n: int = 1000) -> tuple[np.ndarray, int]:
    """Fixed ``(n, 4)`` array of the strongest points, zero padded, and the valid count."""
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    out = np.zeros((n, 4))
    order = np.argsort(-p.intensities, kind="stable")[:n]
    out[: len(order)] = p.as_array()[order]
    return out, len(order)


def effective_rpc_ratio(p: RadarPointCloud, body_joints, radius: float = 0.5) -> float:
    """Fraction of points within ``radius`` of their nearest body joint."""
    if radius <= 0:
        raise InvalidArgumentError("radius must be > 0")
    if len(p) == 0:
        return 0.0
    joints = np.asarray(body_joints, dtype=np.float64).reshape(-1, 3)
    if len(joints) == 0:
        return 0.0
    d = np.linalg.norm(p.positions[:, None, :] - joints[None, :, :], axis=2).min(axis=1)
    return float(np.count_nonzero(d <= radius)) / len(p)


# point-cloud blob: "M4PC", u16 version, u16 reserved, u32 count, then count x (x, y, z, intensity) f32
POINTS_MAGIC = b"M4PC"
_POINTS_HEADER = struct.Struct("<4sHHI")


def encode_points(p: RadarPointCloud) -> bytes:
    return _POINTS_HEADER.pack(POINTS_MAGIC, 1, 0, len(p)) + p.as_array().astype("<f4").tobytes()


def decode_points(buf) -> RadarPointCloud:
    buf = bytes(buf)
    if len(buf) < _POINTS_HEADER.size:
        raise CorruptStreamError("point cloud truncated", len(buf))
    magic, version, _, count = _POINTS_HEADER.unpack_from(buf)
    if magic != POINTS_MAGIC or version != 1:
        raise CorruptStreamError("not a point-cloud blob", 0)
    expected = _POINTS_HEADER.size + 16 * count
    if len(buf) != expected:
        raise CorruptStreamError(f"point cloud has {len(buf)} bytes, expected {expected}", min(len(buf), expected))
    a = np.frombuffer(buf, dtype="<f4", offset=_POINTS_HEADER.size).reshape(count, 4).astype(np.float64)
    try:
        return RadarPointCloud(a[:, :3], a[:, 3])
    except InvalidArgumentError as exc:
        raise CorruptStreamError(str(exc), _POINTS_HEADER.size) from None
