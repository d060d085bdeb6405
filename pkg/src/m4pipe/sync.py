"""MoCap trigger detection and MoCap-to-sensor frame alignment."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import InvalidArgumentError, NoTriggerError

MOCAP_RATE = 100.0
SENSOR_RATE = 12.0
TRIGGER_THRESHOLD = 0.10


@dataclass(frozen=True, eq=False)
class MarkerTrack:
    """Head-top marker samples; ``valid`` is False where the marker was occluded."""

    times: np.ndarray
    positions: np.ndarray
    valid: np.ndarray
    rate: float = MOCAP_RATE

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64).reshape(-1)
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        v = np.asarray(self.valid, dtype=bool).reshape(-1)
        if not (len(t) == len(p) == len(v)):
            raise InvalidArgumentError("times, positions and valid must have equal length")
        if self.rate <= 0:
            raise InvalidArgumentError("rate must be > 0")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise InvalidArgumentError("marker timestamps must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "valid", v)

    @classmethod
    def from_positions(cls, positions, rate: float = MOCAP_RATE, valid=None) -> "MarkerTrack":
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        v = np.ones(len(p), bool) if valid is None else valid
        return cls(np.arange(len(p)) / rate, p, v, rate)

    def __len__(self):
        return len(self.times)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "x", "y", "z", "valid"])
            for t, (x, y, z), ok in zip(self.times, self.positions, self.valid):
                w.writerow([repr(float(t)), repr(float(x)), repr(float(y)), repr(float(z)), int(ok)])

    @classmethod
    def from_csv(cls, path, rate: float | None = None) -> "MarkerTrack":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"time_s", "x", "y", "z", "valid"} - set(reader.fieldnames or ())
            if missing:
                raise InvalidArgumentError(f"marker CSV lacks columns {sorted(missing)}")
            for line, row in enumerate(reader, start=2):
                try:
                    rows.append((float(row["time_s"]), float(row["x"]), float(row["y"]), float(row["z"]),
                                 row["valid"].strip().lower() in ("1", "true", "yes")))
                except (TypeError, ValueError) as exc:
                    raise InvalidArgumentError(f"{path}:{line}: {exc}") from None
        if not rows:
            raise InvalidArgumentError(f"{path}: no samples")
        a = np.array([r[:4] for r in rows])
        valid = np.array([r[4] for r in rows])
        if rate is None:
            # rounded so a 100 Hz track reads back as exactly 100.0
            rate = round(1.0 / float(np.median(np.diff(a[:, 0]))), 6) if len(a) > 1 else MOCAP_RATE
        return cls(a[:, 0], a[:, 1:4], valid, rate)


def detect_trigger(track: MarkerTrack, threshold: float = TRIGGER_THRESHOLD) -> int:
    """First sample whose displacement from the first valid sample exceeds ``threshold``.

    The comparison is strict; a displacement of exactly ``threshold`` does
    not trigger. Invalid samples are skipped.
    """
    if threshold <= 0:
        raise InvalidArgumentError("threshold must be > 0")
    valid = np.flatnonzero(track.valid)
    if len(valid) < 2:
        raise InvalidArgumentError("trigger detection needs at least two valid samples")
    ref = track.positions[valid[0]]
    disp = np.linalg.norm(track.positions[valid] - ref, axis=1)
    hits = np.flatnonzero(disp > threshold)
    if len(hits) == 0:
        raise NoTriggerError(f"no marker displacement exceeds {threshold} m")
    return int(valid[hits[0]])


def align_frames(mocap_rate: float, sensor_rate: float, mocap_start: int, n_sensor_frames: int,
                 mocap_length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Nearest MoCap index for each sensor frame, plus a validity mask.

    Sensor frame ``j`` maps to ``round(mocap_start + j * mocap_rate / sensor_rate)``
    with halves rounded up. Arithmetic is exact (rational) so the result
    never depends on float rounding of the rate ratio.
    """
    if mocap_rate <= 0 or sensor_rate <= 0:
        raise InvalidArgumentError("rates must be > 0")
    if mocap_start < 0:
        raise InvalidArgumentError("mocap_start must be >= 0")
    ratio = Fraction(mocap_rate) / Fraction(sensor_rate)
    half = Fraction(1, 2)
    idx = np.array([math.floor(mocap_start + j * ratio + half) for j in range(int(n_sensor_frames))], dtype=np.int64)
    valid = np.ones(len(idx), bool) if mocap_length is None else idx < mocap_length
    return idx, valid
