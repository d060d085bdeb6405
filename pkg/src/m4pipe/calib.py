"""Camera model, PnP extrinsics, the Vicon -> camera -> radar chain, and RGB back-projection."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateGeometryError,
    InsufficientDataError,
    InvalidArgumentError,
    NonConvergenceError,
)
from .geometry import (
    RigidTransform,
    axis_angle_to_rot,
    inverse_transform,
    skew_batch,
    transform_point,
)

MIN_PNP_POINTS = 6
COPLANAR_TOL = 1e-6
LM_MAX_ITER = 100
LM_GRAD_TOL = 1e-10


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy, self.width, self.height)
        if not all(np.isfinite(vals)):
            raise InvalidArgumentError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be > 0")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidArgumentError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, u: float, v: float) -> bool:
        return 0.0 <= u <= self.width and 0.0 <= v <= self.height

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "W": self.width, "H": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        try:
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["W"]), int(d["H"]))
        except KeyError as exc:
            raise InvalidArgumentError(f"intrinsics missing field {exc}") from None


@dataclass(frozen=True)
class Correspondence:
    world: tuple  # Vicon frame, meters
    pixel: tuple  # (u, v)


@dataclass(frozen=True)
class CalibrationResult:
    extrinsics: RigidTransform
    mean_reprojection_error: float
    per_point_residuals: np.ndarray
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.extrinsics.rotation.reshape(-1)],
            "translation": [float(x) for x in self.extrinsics.translation],
            "mean_reproj_px": float(self.mean_reprojection_error),
            "residuals_px": [float(x) for x in self.per_point_residuals],
        }


@dataclass(frozen=True)
class WeakPerspective:
    s_hat: float
    u_hat: float
    v_hat: float
    box_size: float
    box_center: tuple

    def __post_init__(self):
        if not (-1.0 <= self.u_hat <= 1.0 and -1.0 <= self.v_hat <= 1.0):
            raise InvalidArgumentError("u_hat and v_hat must lie in [-1, 1]")

    @property
    def b_s(self) -> float:
        return self.box_size * self.s_hat


def project(k: CameraIntrinsics, ext: RigidTransform, p_world) -> tuple[float, float]:
    pc = transform_point(ext, p_world)
    if pc[2] <= 0:
        raise BehindCameraError(f"point has camera depth {pc[2]:.6g} <= 0")
    return (k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy)


def project_points(k: CameraIntrinsics, ext: RigidTransform, pts) -> np.ndarray:
    """Vectorized :func:`project` over ``(n, 3)`` points."""
    pc = ext.apply(pts)
    if np.any(pc[:, 2] <= 0):
        raise BehindCameraError("a point lies on or behind the camera plane")
    return np.stack([k.fx * pc[:, 0] / pc[:, 2] + k.cx, k.fy * pc[:, 1] / pc[:, 2] + k.cy], axis=1)


def _similarity(pts: np.ndarray, target: float) -> np.ndarray:
    """Hartley normalization: centroid to origin, mean distance to ``target``."""
    c = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - c, axis=1))
    s = target / d if d > 0 else 1.0
    dim = pts.shape[1]
    t = np.eye(dim + 1)
    t[:dim, :dim] *= s
    t[:dim, dim] = -s * c
    return t


def _dlt(world: np.ndarray, xn: np.ndarray) -> RigidTransform:
    """Linear pose from world points and normalized image coordinates."""
    tw = _similarity(world, np.sqrt(3.0))
    ti = _similarity(xn, np.sqrt(2.0))
    wh = np.c_[world, np.ones(len(world))] @ tw.T
    ih = np.c_[xn, np.ones(len(xn))] @ ti.T
    n = len(world)
    a = np.zeros((2 * n, 12))
    a[0::2, 0:4] = wh
    a[0::2, 8:12] = -ih[:, 0:1] * wh
    a[1::2, 4:8] = wh
    a[1::2, 8:12] = -ih[:, 1:2] * wh
    p = np.linalg.svd(a)[2][-1].reshape(3, 4)
    p = np.linalg.inv(ti) @ p @ tw
    if np.linalg.det(p[:, :3]) < 0:
        p = -p
    u, s, vt = np.linalg.svd(p[:, :3])
    r = u @ vt
    t = p[:, 3] / s.mean()
    return RigidTransform(r, t)


def _residuals(k, rot, t, world, pix):
    pc = world @ rot.T + t
    z = pc[:, 2]
    proj = np.stack([k.fx * pc[:, 0] / z + k.cx, k.fy * pc[:, 1] / z + k.cy], axis=1)
    return (proj - pix).reshape(-1), pc


def _jacobian(k, rot, world, pc):
    """d(residual)/d(delta, t) for the left perturbation ``R <- exp([delta]x) R``."""
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    n = len(pc)
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = k.fx / z
    dproj[:, 0, 2] = -k.fx * x / z**2
    dproj[:, 1, 1] = k.fy / z
    dproj[:, 1, 2] = -k.fy * y / z**2
    dpc = np.concatenate([-skew_batch(world @ rot.T), np.broadcast_to(np.eye(3), (n, 3, 3))], axis=2)
    return (dproj @ dpc).reshape(2 * n, 6)


def _lm(k, init: RigidTransform, world, pix):
    rot, t = init.rotation, init.translation
    r, pc = _residuals(k, rot, t, world, pix)
    if np.any(pc[:, 2] <= 0):
        raise DegenerateGeometryError("linear initialization puts points behind the camera")
    cost = float(r @ r)
    lam = 1e-3
    for it in range(1, LM_MAX_ITER + 1):
        j = _jacobian(k, rot, world, pc)
        grad = j.T @ r
        if np.linalg.norm(grad) < LM_GRAD_TOL:
            return rot, t, it
        h = j.T @ j
        while True:
            step = -np.linalg.solve(h + lam * np.diag(np.diag(h) + 1e-12), grad)
            rot_new = axis_angle_to_rot(step[:3]) @ rot
            t_new = t + step[3:]
            r_new, pc_new = _residuals(k, rot_new, t_new, world, pix)
            cost_new = float(r_new @ r_new) if np.all(pc_new[:, 2] > 0) else np.inf
            if cost_new <= cost:
                break
            lam *= 10.0
            if lam > 1e16:
                # no descent direction left at machine precision
                return rot, t, it
        small = np.linalg.norm(step) <= 1e-14 * (np.linalg.norm(t) + 1e-14)
        flat = cost - cost_new <= 1e-15 * max(cost, 1e-300)
        rot, t, r, pc, cost = rot_new, t_new, r_new, pc_new, cost_new
        lam = max(lam / 10.0, 1e-12)
        if small or flat:
            return rot, t, it
    raise NonConvergenceError(f"pose refinement did not converge in {LM_MAX_ITER} iterations",
                              float(np.mean(np.linalg.norm(r.reshape(-1, 2), axis=1))))


def solve_pnp(k: CameraIntrinsics, corr) -> CalibrationResult:
    """Pose of the world frame in the camera frame from >= 6 non-coplanar points.

    Hartley-normalized DLT on normalized image coordinates, projection of
    the linear estimate onto SO(3), then Levenberg-Marquardt on the
    pixel reprojection error.
    """
    corr = list(corr)
    if len(corr) < MIN_PNP_POINTS:
        raise InsufficientDataError(f"PnP needs at least {MIN_PNP_POINTS} correspondences, got {len(corr)}")
    world = np.array([c.world for c in corr], dtype=np.float64)
    pix = np.array([c.pixel for c in corr], dtype=np.float64)
    if world.shape != (len(corr), 3) or pix.shape != (len(corr), 2):
        raise InvalidArgumentError("correspondences need 3D world points and 2D pixels")
    if not (np.all(np.isfinite(world)) and np.all(np.isfinite(pix))):
        raise InvalidArgumentError("correspondences must be finite")
    for u, v in pix:
        if not k.contains(u, v):
            raise InvalidArgumentError(f"pixel ({u:.3f}, {v:.3f}) lies outside the image")
    sv = np.linalg.svd(world - world.mean(axis=0), compute_uv=False)
    if sv[-1] <= COPLANAR_TOL * sv[0]:
        raise DegenerateGeometryError("world points are coplanar (or collinear)")
    xn = np.stack([(pix[:, 0] - k.cx) / k.fx, (pix[:, 1] - k.cy) / k.fy], axis=1)
    rot, t, iters = _lm(k, _dlt(world, xn), world, pix)
    # re-orthonormalize to remove drift from repeated left-multiplication
    u, _, vt = np.linalg.svd(rot)
    ext = RigidTransform(u @ vt, t)
    res = np.linalg.norm(project_points(k, ext, world) - pix, axis=1)
    return CalibrationResult(ext, float(res.mean()), res, iters)


def chain_vicon_to_radar(cam_from_vicon: RigidTransform, cam_from_radar: RigidTransform, p_vicon) -> np.ndarray:
    """Vicon point -> camera frame -> radar frame."""
    p_cam = transform_point(cam_from_vicon, p_vicon)
    return transform_point(inverse_transform(cam_from_radar), p_cam)


def radar_from_vicon(cam_from_vicon: RigidTransform, cam_from_radar: RigidTransform) -> RigidTransform:
    return inverse_transform(cam_from_radar).compose(cam_from_vicon)


def solve_rigid_3d(src, dst) -> RigidTransform:
    """Least-squares rotation and translation with ``dst ~ R src + t`` (Umeyama, no scale)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise InvalidArgumentError("point sets must both be (n, 3)")
    if len(src) < 3:
        raise InsufficientDataError("rigid alignment needs at least 3 point pairs")
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - ms, dst - md
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[1] <= COPLANAR_TOL * sv[0]:
        raise DegenerateGeometryError("source points are collinear")
    u, _, vt = np.linalg.svd(b.T @ a)
    d = np.eye(3)
    d[2, 2] = np.sign(np.linalg.det(u @ vt)) or 1.0
    r = u @ d @ vt
    return RigidTransform(r, md - r @ ms)


def weak_perspective_backproject(k: CameraIntrinsics, wp: WeakPerspective) -> np.ndarray:
    """Camera-frame point for a crop-space weak-perspective prediction.

    Depth follows ``z = 2 fx / b_s``. The back-projection uses the image
    center (W/2, H/2), ``fx`` for x and ``fy`` for y.
    """
    bs = wp.b_s
    if not bs > 0:
        raise InvalidArgumentError(f"b_s = box_size * s_hat must be > 0, got {bs}")
    x_pix = wp.box_center[0] + 0.5 * bs * wp.u_hat
    y_pix = wp.box_center[1] + 0.5 * bs * wp.v_hat
    z = 2.0 * k.fx / bs
    return np.array([(x_pix - 0.5 * k.width) * z / k.fx, (y_pix - 0.5 * k.height) * z / k.fy, z])


def depth_backproject(k: CameraIntrinsics, depth) -> np.ndarray:
    """``(n, 3)`` camera-frame points for every pixel with positive depth (row-major order)."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise InvalidArgumentError("depth image must be 2D")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise InvalidArgumentError("depth values must be finite and >= 0")
    v, u = np.nonzero(d > 0)
    z = d[v, u]
    return np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=1)


# --------------------------------------------------------------------------
# JSON I/O


def load_intrinsics(path) -> CameraIntrinsics:
    return CameraIntrinsics.from_dict(json.loads(Path(path).read_text()))


def load_correspondences(path) -> list:
    """``[{"world": [x, y, z], "pixel": [u, v]}, ...]``, optionally under a "points" key."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data.get("points", [])
    try:
        return [Correspondence(tuple(map(float, d["world"])), tuple(map(float, d["pixel"]))) for d in data]
    except (KeyError, TypeError) as exc:
        raise InvalidArgumentError(f"malformed correspondence entry: {exc}") from None


def save_result(path, result: CalibrationResult) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2) + "\n")


def load_transform(path) -> RigidTransform:
    d = json.loads(Path(path).read_text())
    return RigidTransform(np.array(d["rotation"], dtype=np.float64).reshape(3, 3), d["translation"])
