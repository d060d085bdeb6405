"""Rotation and rigid-transform primitives.

Vectors are plain ``(3,)`` float arrays and rotations ``(3, 3)`` arrays;
only :class:`RigidTransform` gets its own type. Axis-angle vectors store
the angle as their magnitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

ORTHO_TOL = 1e-6
# below this angle the closed forms lose precision; use series expansions
SMALL_ANGLE = 1e-4


def _vec3(v, name="vector") -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise InvalidArgumentError(f"{name} must have shape (3,), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError(f"{name} has non-finite components")
    return a


def skew(v) -> np.ndarray:
    """Cross-product matrix ``[v]x`` so that ``skew(v) @ w == cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`skew` applied to the antisymmetric part of ``m``."""
    return 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])


def validate_rotation(r, name="rotation") -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise InvalidArgumentError(f"{name} must be 3x3, got {r.shape}")
    if not np.all(np.isfinite(r)):
        raise InvalidArgumentError(f"{name} has non-finite entries")
    if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL:
        raise InvalidArgumentError(f"{name} is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
        raise InvalidArgumentError(f"{name} has det != +1")
    return r


def canonical_axis_angle(a) -> np.ndarray:
    """Fold an axis-angle vector so its magnitude lies in ``[0, pi]``.

    At exactly pi the axis sign is chosen so that its first nonzero
    component is positive.
    """
    a = _vec3(a, "axis-angle")
    angle = float(np.linalg.norm(a))
    if angle == 0.0:
        return np.zeros(3)
    axis = a / angle
    angle = math.fmod(angle, 2.0 * math.pi)
    if angle > math.pi:
        axis = -axis
        angle = 2.0 * math.pi - angle
    if abs(angle - math.pi) < 1e-12:
        angle = math.pi
        axis = _positive_first(axis)
    return axis * angle


def _positive_first(axis: np.ndarray) -> np.ndarray:
    for c in axis:
        if abs(c) > 1e-12:
            return axis if c > 0 else -axis
    return axis


def axis_angle_to_rot(a) -> np.ndarray:
    """Rodrigues' formula, ``exp([a]x)``."""
    a = _vec3(a, "axis-angle")
    theta = float(np.linalg.norm(a))
    k = skew(a)
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return np.eye(3) + (1.0 - t2 / 6.0) * k + (0.5 - t2 / 24.0) * (k @ k)
    return (
        np.eye(3)
        + (math.sin(theta) / theta) * k
        + ((1.0 - math.cos(theta)) / (theta * theta)) * (k @ k)
    )


def rot_to_axis_angle(r) -> np.ndarray:
    """Logarithm map; returns the canonical axis-angle vector."""
    r = validate_rotation(r)
    v = vee(r)  # sin(theta) * axis
    s = float(np.linalg.norm(v))
    c = 0.5 * (np.trace(r) - 1.0)
    theta = math.atan2(s, c)
    if theta < SMALL_ANGLE:
        # theta / sin(theta) ~ 1 + theta^2 / 6
        return v * (1.0 + theta * theta / 6.0)
    if c > -0.5:
        return v * (theta / s)
    # near pi: recover the axis from the symmetric part, whose largest
    # diagonal column is well conditioned, then take the sign from vee()
    b = 0.5 * (r + r.T) - c * np.eye(3)
    col = int(np.argmax(np.diag(b)))
    axis = b[:, col] / np.linalg.norm(b[:, col])
    if s > 1e-12:
        if float(axis @ v) < 0.0:
            axis = -axis
    else:
        axis = _positive_first(axis)
    return canonical_axis_angle(axis * theta)


def geodesic_angle(r1, r2) -> float:
    """Angle of the relative rotation ``r1^T r2``, in ``[0, pi]`` radians."""
    r1 = validate_rotation(r1, "r1")
    r2 = validate_rotation(r2, "r2")
    return _geodesic_unchecked(r1, r2)


def _geodesic_unchecked(r1: np.ndarray, r2: np.ndarray) -> float:
    # atan2 keeps full precision for tiny angles, where acos(trace) does not
    m = r1.T @ r2
    cos = 0.5 * (float(np.trace(m)) - 1.0)
    sin = float(np.linalg.norm(vee(m)))
    return math.atan2(sin, cos)


def rot_jacobian(a) -> np.ndarray:
    """Derivatives ``dR/da_i`` of :func:`axis_angle_to_rot`, shape ``(3, 3, 3)``.

    Uses the closed form of Gallego & Yezzi (2015); near zero a
    second-order series replaces it.
    """
    a = np.asarray(a, dtype=np.float64)
    theta2 = float(a @ a)
    basis = np.eye(3)
    out = np.empty((3, 3, 3))
    if theta2 < SMALL_ANGLE**2:
        k = skew(a)
        for i in range(3):
            e = skew(basis[i])
            out[i] = e + 0.5 * (e @ k + k @ e)
        return out
    r = axis_angle_to_rot(a)
    ka = skew(a)
    i_minus_r = np.eye(3) - r
    for i in range(3):
        out[i] = (a[i] * ka + skew(np.cross(a, i_minus_r[:, i]))) @ r / theta2
    return out


@dataclass(frozen=True)
class RigidTransform:
    """``p -> rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", validate_rotation(self.rotation))
        object.__setattr__(self, "translation", _vec3(self.translation, "translation"))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self o other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        """Transform an ``(..., 3)`` array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None


def transform_point(t: RigidTransform, p) -> np.ndarray:
    return t.rotation @ _vec3(p, "point") + t.translation


def inverse_transform(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


# --------------------------------------------------------------------------
# batched kernels for the loss and metric hot paths; no validation


def skew_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def axis_angle_to_rot_batch(a: np.ndarray) -> np.ndarray:
    """Rodrigues' formula over ``(n, 3)`` vectors."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    t2 = np.einsum("ni,ni->n", a, a)
    t = np.sqrt(t2)
    small = t < SMALL_ANGLE
    safe = np.where(small, 1.0, t)
    c1 = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    c2 = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    k = skew_batch(a)
    return np.eye(3) + c1[:, None, None] * k + c2[:, None, None] * (k @ k)


def rot_jacobian_batch(a: np.ndarray) -> np.ndarray:
    """``dR/da_i`` for ``(n, 3)`` vectors; shape ``(n, 3, 3, 3)`` indexed ``[n, i]``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    n = len(a)
    t2 = np.einsum("ni,ni->n", a, a)
    small = t2 < SMALL_ANGLE**2
    k = skew_batch(a)
    e = skew_batch(np.eye(3))  # (3, 3, 3)
    out = np.empty((n, 3, 3, 3))
    # series branch
    out[:] = e[None] + 0.5 * (e[None] @ k[:, None] + k[:, None] @ e[None])
    if np.any(~small):
        idx = np.flatnonzero(~small)
        ab, kb, tb = a[idx], k[idx], t2[idx]
        r = axis_angle_to_rot_batch(ab)
        i_minus_r = np.eye(3) - r
        for i in range(3):
            c = np.cross(ab, i_minus_r[:, :, i])
            m = ab[:, i, None, None] * kb + skew_batch(c)
            out[idx, i] = (m @ r) / tb[:, None, None]
    return out


def geodesic_angle_batch(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    cos = 0.5 * (np.einsum("nij,nij->n", r1, r2) - 1.0)
    return np.arccos(np.clip(cos, -1.0, 1.0))
