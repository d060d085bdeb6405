"""Synthetic scenes: body motion, point-scatterer rendering, paired ground truth.

Scatterers sit on the body's joints and capsule vertices. Each one returns
an amplitude proportional to 1/r^2 (r = range from the sensor) and is
splatted onto the voxel grid as an axis-aligned Gaussian truncated at
3 sigma per axis, so a splat keeps >= 99.19% of its energy. Folded Gaussian
noise is then added and values below ``sparsity_floor`` are zeroed, which
keeps frames sparse the way thresholded radar output is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .body import HEAD_TOP, BodyModel, BodyParams
from .errors import InvalidArgumentError
from .store import SampleKey
from .sync import MOCAP_RATE, SENSOR_RATE, MarkerTrack
from .tensor import GridGeometry, RadarTensor

FAMILIES = ("in_place", "sit_in_place", "non_in_place")
TRUNCATE_SIGMAS = 3.0
SWING_SAMPLES = 10


@dataclass(frozen=True)
class ScenarioConfig:
    family: str = "in_place"
    duration_s: float = 4.0
    sensor_rate: float = SENSOR_RATE
    mocap_rate: float = MOCAP_RATE
    seed: int = 0
    beta: tuple = (0.0,) * 10
    g: float = 1.0
    position: tuple = (0.0, 3.0)  # pelvis x, y for the in-place families
    facing: float = 0.0  # yaw, radians; 0 faces the sensor
    amplitude: float = 0.6  # limb swing, radians
    period_s: float = 2.0
    waypoints: tuple = ((-1.0, 2.5), (1.0, 3.5))
    speed: float = 1.0  # m/s along the waypoints
    scatterer_amplitude: float = 1.0  # return of one scatterer at 1 m
    scatterer_sigma: float = 0.085
    noise_floor: float = 2.5e-4
    sparsity_floor: float = 1e-3
    clutter: tuple = ()  # (x, y, z, amplitude) static scatterers
    sensor_position: tuple = (0.0, 0.0, 0.0)
    trigger_hold_s: float = 1.0
    trigger_swing: float = 0.15
    subject: int = 1
    action: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidArgumentError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.duration_s <= 0:
            raise InvalidArgumentError("duration_s must be > 0")
        if self.sensor_rate <= 0 or self.mocap_rate <= 0:
            raise InvalidArgumentError("rates must be > 0")
        if self.scatterer_sigma <= 0:
            raise InvalidArgumentError("scatterer_sigma must be > 0")
        if self.noise_floor < 0 or self.sparsity_floor < 0:
            raise InvalidArgumentError("noise and sparsity floors must be >= 0")
        if len(self.beta) != 10:
            raise InvalidArgumentError("beta needs 10 coefficients")
        if self.family == "non_in_place" and len(self.waypoints) < 2:
            raise InvalidArgumentError("non_in_place needs at least two waypoints")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "waypoints", tuple(tuple(float(c) for c in w) for w in self.waypoints))
        object.__setattr__(self, "clutter", tuple(tuple(float(c) for c in s) for s in self.clutter))

    @property
    def n_frames(self) -> int:
        return max(1, int(round(self.duration_s * self.sensor_rate)))

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown scenario keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("beta", "position", "waypoints", "clutter", "sensor_position"):
            if k in d:
                d[k] = tuple(tuple(x) if isinstance(x, list) else x for x in d[k])
        return cls(**d)

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)


@dataclass(eq=False)
class SyntheticSequence:
    frames: list
    gt: list
    marker_track: MarkerTrack
    trigger_index: int
    keys: list = field(default_factory=list)


def _rot_axis(axis: int, angle: float) -> np.ndarray:
    v = np.zeros(3)
    v[axis] = angle
    return v


def standing_height(model: BodyModel, beta, g: float) -> float:
    """Pelvis height that puts the lowest capsule point on the floor."""
    p = BodyParams(beta=np.asarray(beta), g=g)
    return float(-model.forward_vertices(p)[:, 2].min())


def _path_position(waypoints, distance: float):
    """Point and unit heading at arc length ``distance`` along a polyline (clamped)."""
    pts = np.asarray(waypoints, dtype=np.float64)
    seg = np.diff(pts, axis=0)
    lens = np.linalg.norm(seg, axis=1)
    for a, d, n in zip(pts[:-1], seg, lens):
        if n == 0:
            continue
        if distance <= n:
            return a + d * (distance / n), d / n
        distance -= n
    last = np.flatnonzero(lens > 0)
    heading = seg[last[-1]] / lens[last[-1]] if len(last) else np.array([0.0, -1.0])
    return pts[-1], heading


def _pose_at(c: ScenarioConfig, model: BodyModel, t: float, h0: float) -> BodyParams:
    w = 2.0 * math.pi / c.period_s
    a = c.amplitude
    theta = np.zeros((22, 3))
    beta = np.array(c.beta)
    if c.family == "in_place":
        tau = np.array([c.position[0], c.position[1], h0])
        yaw = c.facing
        phi = a * math.sin(w * t)
        theta[16] = _rot_axis(1, phi)
        theta[17] = _rot_axis(1, -phi)
        theta[18] = _rot_axis(2, 0.5 * a * (1.0 - math.cos(w * t)))
        theta[19] = _rot_axis(2, -0.5 * a * (1.0 - math.cos(w * t)))
        theta[3] = _rot_axis(2, 0.25 * a * math.sin(w * t))
    elif c.family == "sit_in_place":
        thigh = float(np.linalg.norm(model.shaped_offsets(beta, model.gender(c.g))[4]))
        tau = np.array([c.position[0], c.position[1], h0 - thigh])
        yaw = c.facing
        lift = 0.5 * a * (1.0 - math.cos(w * t))
        theta[1] = _rot_axis(0, -math.pi / 2)
        theta[2] = _rot_axis(0, -math.pi / 2)
        theta[4] = _rot_axis(0, math.pi / 2 - lift)
        theta[5] = _rot_axis(0, math.pi / 2 - lift * (1.0 if a == 0 else math.sin(w * t) ** 2))
        theta[16] = _rot_axis(1, 1.2)
        theta[17] = _rot_axis(1, -1.2)
    else:
        xy, heading = _path_position(c.waypoints, c.speed * t)
        tau = np.array([xy[0], xy[1], h0])
        yaw = math.atan2(heading[0], -heading[1])
        s = math.sin(w * t)
        theta[1] = _rot_axis(0, a * s)
        theta[2] = _rot_axis(0, -a * s)
        theta[4] = _rot_axis(0, 0.5 * a * max(0.0, s))
        theta[5] = _rot_axis(0, 0.5 * a * max(0.0, -s))
        theta[16] = np.array([-0.5 * a * s, 1.2, 0.0])
        theta[17] = np.array([0.5 * a * s, -1.2, 0.0])
    return BodyParams(_rot_axis(2, yaw), beta, tau, theta, c.g)


def generate_motion(c: ScenarioConfig, model: BodyModel | None = None, times=None) -> list:
    """Ground-truth parameters at each sensor frame (or at explicit ``times``)."""
    model = model or BodyModel()
    h0 = standing_height(model, c.beta, c.g)
    if times is None:
        times = np.arange(c.n_frames) / c.sensor_rate
    return [_pose_at(c, model, float(t), h0) for t in times]


def scatterers(model: BodyModel, params: BodyParams) -> np.ndarray:
    return np.concatenate([model.forward_joints(params), model.forward_vertices(params)])


def splat(geometry: GridGeometry, points, amplitudes, sigma: float) -> np.ndarray:
    """Accumulate truncated Gaussian splats; returns a float64 volume.

    Each axis kernel is cut at ``TRUNCATE_SIGMAS`` and renormalised, so a
    splat fully inside the grid sums to its amplitude.
    """
    dims = np.array(geometry.dims)
    origin = np.array(geometry.origin, dtype=np.float64)
    pitch = np.array(geometry.pitch, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    amps = np.asarray(amplitudes, dtype=np.float64).reshape(-1)
    out = np.zeros(geometry.size)
    if len(pts) == 0:
        return out.reshape(geometry.dims)
    center = np.floor((pts - origin) / pitch + 0.5).astype(np.int64)
    weights, indices = [], []
    for ax in range(3):
        k = int(math.ceil(TRUNCATE_SIGMAS * sigma / pitch[ax]))
        off = np.arange(-k, k + 1)
        idx = center[:, ax:ax + 1] + off  # (n, 2k+1)
        d = origin[ax] + idx * pitch[ax] - pts[:, ax:ax + 1]
        w = np.exp(-0.5 * (d / sigma) ** 2)
        w[np.abs(d) > TRUNCATE_SIGMAS * sigma] = 0.0
        # normalise over the truncated window so only the grid edge loses energy
        w /= w.sum(axis=1, keepdims=True)
        w[(idx < 0) | (idx >= dims[ax])] = 0.0
        weights.append(w)
        indices.append(np.clip(idx, 0, dims[ax] - 1))
    w = (amps[:, None, None, None] * weights[0][:, :, None, None]
         * weights[1][:, None, :, None] * weights[2][:, None, None, :])
    lin = ((indices[0][:, :, None, None] * dims[1] + indices[1][:, None, :, None]) * dims[2]
           + indices[2][:, None, None, :])
    keep = w.reshape(-1) > 0
    out += np.bincount(lin.reshape(-1)[keep], weights=w.reshape(-1)[keep], minlength=geometry.size)
    return out.reshape(geometry.dims)


def render_points(geometry: GridGeometry, points, amplitudes, c: ScenarioConfig, frame_index: int = 0) -> RadarTensor:
    """Splat explicit scatterers plus the scenario clutter, then noise and floor."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    amps = np.asarray(amplitudes, dtype=np.float64).reshape(-1)
    if c.clutter:
        cl = np.asarray(c.clutter, dtype=np.float64)
        pts = np.concatenate([pts, cl[:, :3]])
        amps = np.concatenate([amps, cl[:, 3]])
    vol = splat(geometry, pts, amps, c.scatterer_sigma)
    if c.noise_floor > 0:
        rng = np.random.default_rng([c.seed, frame_index])
        vol += np.abs(rng.normal(0.0, c.noise_floor, size=vol.shape))
    vol[vol < c.sparsity_floor] = 0.0
    return RadarTensor(geometry, vol.astype(np.float32))


def return_amplitudes(points, c: ScenarioConfig) -> np.ndarray:
    r2 = np.sum((np.asarray(points) - np.asarray(c.sensor_position, dtype=np.float64)) ** 2, axis=1)
    return c.scatterer_amplitude / np.maximum(r2, 1e-6)


def render_frame(geometry: GridGeometry, params: BodyParams, c: ScenarioConfig,
                 frame_index: int = 0, model: BodyModel | None = None) -> RadarTensor:
    model = model or BodyModel()
    pts = scatterers(model, params)
    return render_points(geometry, pts, return_amplitudes(pts, c), c, frame_index)


def marker_track(c: ScenarioConfig, model: BodyModel | None = None) -> tuple[MarkerTrack, int]:
    """Head-top marker at the MoCap rate with a planted trigger swing.

    The subject holds still for ``trigger_hold_s``, then the head-top
    marker sweeps ``trigger_swing`` meters to the subject's right over
    ``SWING_SAMPLES`` samples; motion proper starts at the first sample
    whose displacement exceeds 0.10 m. Returns the track and that index.
    """
    model = model or BodyModel()
    n_hold = int(round(c.trigger_hold_s * c.mocap_rate))
    start = generate_motion(c, model, times=[0.0])[0]
    nodes, rots = model.forward_nodes(start)
    head0 = nodes[HEAD_TOP]
    right = rots[0] @ np.array([-1.0, 0.0, 0.0])
    ramp = c.trigger_swing * np.arange(SWING_SAMPLES + 1) / SWING_SAMPLES
    trigger = n_hold + int(np.flatnonzero(ramp > 0.10)[0])
    ramp = ramp[: trigger - n_hold + 1]

    n_motion = int(math.ceil(c.duration_s * c.mocap_rate)) + 1
    motion = generate_motion(c, model, times=np.arange(1, n_motion) / c.mocap_rate)
    heads = [model.forward_nodes(p)[0][HEAD_TOP] for p in motion]
    pos = np.concatenate([
        np.repeat(head0[None], n_hold, axis=0),
        head0 + ramp[:, None] * right,
        np.asarray(heads).reshape(-1, 3) + c.trigger_swing * right,
    ])
    rng = np.random.default_rng([c.seed, 1 << 20])
    pos = pos + rng.normal(0.0, 5e-4, size=pos.shape)
    return MarkerTrack.from_positions(pos, c.mocap_rate), trigger


def generate_sequence(c: ScenarioConfig, geometry: GridGeometry | None = None,
                      model: BodyModel | None = None, workers: int = 1) -> SyntheticSequence:
    geometry = geometry or GridGeometry()
    model = model or BodyModel()
    gt = generate_motion(c, model)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            frames = list(pool.map(lambda i: render_frame(geometry, gt[i], c, i, model), range(len(gt))))
    else:
        frames = [render_frame(geometry, p, c, i, model) for i, p in enumerate(gt)]
    track, trigger = marker_track(c, model)
    keys = [SampleKey(c.subject, c.action, i) for i in range(len(gt))]
    return SyntheticSequence(frames, gt, track, trigger, keys)
