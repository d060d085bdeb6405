"""Body parameters, a simplified 22-joint capsule body, and the mesh losses.

The body is a stand-in for SMPL-X: the same parameter vector
``(alpha, beta, tau, theta, g)`` drives a kinematic chain of 22 joints plus
five end-effector tips (head top, hands, toes), and vertices are sampled on
capsules around every bone. It is not a blend-skinned mesh.

Body frame: +x is the subject's left, -y is forward, +z is up. A zero pose
therefore faces a radar placed at the world origin looking along +y.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptStreamError, InvalidArgumentError
from .geometry import (
    axis_angle_to_rot,
    axis_angle_to_rot_batch,
    canonical_axis_angle,
    geodesic_angle_batch,
    rot_jacobian_batch,
)

N_JOINTS = 22
N_BETAS = 10
N_PARAMS = 3 + N_BETAS + 3 + 3 * N_JOINTS + 1  # 83

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)
TIP_NAMES = ("head_top", "left_hand", "right_hand", "left_toe", "right_toe")
TIP_PARENTS = (15, 20, 21, 10, 11)
HEAD_TOP = N_JOINTS  # node index of the head-top tip

# male rest offsets from the parent node, meters; rows 22..26 are the tips
_MALE_OFFSETS = np.array([
    [0.0, 0.0, 0.0],
    [0.09, 0.0, -0.08], [-0.09, 0.0, -0.08], [0.0, 0.01, 0.11],
    [0.0, 0.0, -0.38], [0.0, 0.0, -0.38], [0.0, 0.0, 0.13],
    [0.0, 0.01, -0.38], [0.0, 0.01, -0.38], [0.0, 0.0, 0.06],
    [0.0, -0.12, -0.06], [0.0, -0.12, -0.06], [0.0, 0.0, 0.21],
    [0.07, 0.0, 0.14], [-0.07, 0.0, 0.14], [0.0, -0.02, 0.10],
    [0.11, 0.0, 0.03], [-0.11, 0.0, 0.03], [0.26, 0.0, 0.0],
    [-0.26, 0.0, 0.0], [0.25, 0.0, 0.0], [-0.25, 0.0, 0.0],
    [0.0, 0.0, 0.20], [0.09, 0.0, 0.0], [-0.09, 0.0, 0.0],
    [0.0, -0.06, 0.0], [0.0, -0.06, 0.0],
])
# female template: 7% shorter, wider hips, narrower shoulders
_FEMALE_SCALE = np.full((27, 3), 0.93)
_FEMALE_SCALE[[1, 2], 0] *= 1.12
_FEMALE_SCALE[[13, 14, 16, 17], 0] *= 0.9

# capsule radius of the bone ending at each node (node 0 has no bone)
_RADII = np.array([
    0.0, 0.08, 0.08, 0.11, 0.07, 0.07, 0.11, 0.05, 0.05, 0.11, 0.04, 0.04,
    0.06, 0.06, 0.06, 0.05, 0.06, 0.06, 0.045, 0.045, 0.038, 0.038,
    0.09, 0.035, 0.035, 0.035, 0.035,
])


def _default_shape_basis() -> np.ndarray:
    b = np.zeros((27, N_BETAS, 3))
    b[:, 0, :] = 0.1  # overall stature
    b[[1, 2, 13, 14, 16, 17], 1, 0] = 0.08  # girth
    b[[4, 5, 7, 8], 2, 2] = 0.06  # leg length
    b[[18, 19, 20, 21, 23, 24], 3, 0] = 0.06  # arm length
    b[[3, 6, 9, 12], 4, 2] = 0.06  # torso length
    rng = np.random.default_rng(20240615)
    b[:, 5:, :] = 0.02 * rng.standard_normal((27, 5, 3))
    b[0] = 0.0
    return b


@dataclass
class BodyParams:
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(3))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(N_BETAS))
    tau: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta: np.ndarray = field(default_factory=lambda: np.zeros((N_JOINTS, 3)))
    g: float = 1.0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(3)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(N_BETAS)
        self.tau = np.asarray(self.tau, dtype=np.float64).reshape(3)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(N_JOINTS, 3)
        self.g = float(self.g)
        if not (0.0 <= self.g <= 1.0):
            raise InvalidArgumentError(f"gender probability {self.g} outside [0, 1]")
        if not np.all(np.isfinite(self.to_vector())):
            raise InvalidArgumentError("body parameters must be finite")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta, self.tau, self.theta.reshape(-1), [self.g]])

    @classmethod
    def from_vector(cls, v) -> "BodyParams":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (N_PARAMS,):
            raise InvalidArgumentError(f"parameter vector must have {N_PARAMS} entries, got {v.shape}")
        return cls(v[0:3], v[3:13], v[13:16], v[16:82], v[82])

    def canonical(self) -> "BodyParams":
        """Copy with every rotation folded to magnitude <= pi."""
        return BodyParams(
            canonical_axis_angle(self.alpha), self.beta, self.tau,
            np.array([canonical_axis_angle(r) for r in self.theta]), self.g,
        )

    def copy(self, **changes) -> "BodyParams":
        p = BodyParams(self.alpha.copy(), self.beta.copy(), self.tau.copy(), self.theta.copy(), self.g)
        for k, v in changes.items():
            setattr(p, k, v)
        p.__post_init__()
        return p


class BodyModel:
    """Kinematic tree with per-gender rest offsets, a linear shape basis and capsules."""

    around = 8

    def __init__(self, shape_basis: np.ndarray | None = None):
        self.parents = np.array(PARENTS)
        self.node_parents = np.array(PARENTS + TIP_PARENTS)
        self.templates = {"male": _MALE_OFFSETS.copy(), "female": _MALE_OFFSETS * _FEMALE_SCALE}
        self.shape_basis = _default_shape_basis() if shape_basis is None else np.asarray(shape_basis)
        self.radii = _RADII.copy()
        lengths = np.linalg.norm(_MALE_OFFSETS, axis=1)
        # ring count per bone is gender independent so vertex sets always match
        self.rings = np.where(lengths > 0, np.maximum(2, np.round(lengths / 0.06).astype(int) + 1), 0)
        self._frames = [self._bone_frame(_MALE_OFFSETS[n]) for n in range(len(_MALE_OFFSETS))]
        self._check_tree()

    def _check_tree(self):
        for j, p in enumerate(self.node_parents):
            if j == 0:
                assert p == -1
            else:
                assert 0 <= p < min(j, N_JOINTS), "nodes must come after their parents"

    @staticmethod
    def _bone_frame(offset):
        n = np.linalg.norm(offset)
        if n == 0:
            return None
        d = offset / n
        ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = ref - (ref @ d) * d
        u /= np.linalg.norm(u)
        return u, np.cross(d, u)

    @property
    def vertex_count(self) -> int:
        return int(sum(r * self.around + 2 for r in self.rings if r))

    @staticmethod
    def gender(g: float) -> str:
        return "male" if g >= 0.5 else "female"

    def shaped_offsets(self, beta, gender: str) -> np.ndarray:
        scale = 1.0 + np.einsum("nbk,b->nk", self.shape_basis, np.asarray(beta, dtype=np.float64))
        return self.templates[gender] * scale

    def forward_nodes(self, p: BodyParams):
        """Positions of all 27 nodes and global rotations of the 22 joints."""
        offsets = self.shaped_offsets(p.beta, self.gender(p.g))
        rots = np.empty((N_JOINTS, 3, 3))
        pos = np.empty((len(self.node_parents), 3))
        local = axis_angle_to_rot_batch(p.theta)
        rots[0] = axis_angle_to_rot(p.alpha) @ local[0]
        pos[0] = p.tau
        for j in range(1, N_JOINTS):
            par = self.parents[j]
            rots[j] = rots[par] @ local[j]
            pos[j] = pos[par] + rots[par] @ offsets[j]
        for n in range(N_JOINTS, len(self.node_parents)):
            par = self.node_parents[n]
            pos[n] = pos[par] + rots[par] @ offsets[n]
        return pos, rots

    def forward_joints(self, p: BodyParams) -> np.ndarray:
        return self.forward_nodes(p)[0][:N_JOINTS]

    def forward_vertices(self, p: BodyParams) -> np.ndarray:
        pos, rots = self.forward_nodes(p)
        offsets = self.shaped_offsets(p.beta, self.gender(p.g))
        stature = 1.0 + 0.1 * p.beta[0]
        out = []
        for n in range(1, len(self.node_parents)):
            par = self.node_parents[n]
            out.append(pos[par] + self._capsule(n, offsets[n], stature) @ rots[par].T)
        return np.concatenate(out)

    def bone_segments(self, p: BodyParams):
        """``(start, end, radius)`` of every capsule, world frame."""
        pos, _ = self.forward_nodes(p)
        stature = 1.0 + 0.1 * p.beta[0]
        return [(pos[self.node_parents[n]], pos[n], self.radii[n] * stature) for n in range(1, len(pos))]

    def _capsule(self, node: int, offset: np.ndarray, stature: float) -> np.ndarray:
        """Capsule samples around ``offset`` in the parent's frame."""
        u, w = self._frames[node]
        r = self.radii[node] * stature
        d = offset / np.linalg.norm(offset)
        # keep the ring basis orthogonal to the shaped bone
        u = u - (u @ d) * d
        u /= np.linalg.norm(u)
        w = np.cross(d, u)
        t = np.linspace(0.0, 1.0, self.rings[node])
        phi = 2.0 * np.pi * np.arange(self.around) / self.around
        ring = r * (np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * w)
        body = (t[:, None, None] * offset + ring[None]).reshape(-1, 3)
        return np.concatenate([body, [-r * d, offset + r * d]])


# --------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossWeights:
    lambda_2d: float = 1.0
    lambda_mesh: float = 1.0
    lambda_theta: float = 15.0
    lambda_alpha: float = 1.0
    lambda_beta: float = 0.3
    lambda_tau: float = 10.0
    lambda_g: float = 0.5

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not (math.isfinite(value) and value >= 0):
                raise InvalidArgumentError(f"{name} must be finite and >= 0")


BCE_EPS = 1e-7


def rotation_loss_batch(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Geodesic angles between ``exp(pred[n])`` and ``exp(gt[n])`` and gradients in ``pred``.

    The gradient is taken as zero where an angle is 0 or pi.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    g = axis_angle_to_rot_batch(gt)
    angle = geodesic_angle_batch(axis_angle_to_rot_batch(pred), g)
    s = np.sin(angle)
    dcos = 0.5 * np.einsum("nkij,nij->nk", rot_jacobian_batch(pred), g)
    ok = s >= 1e-12
    grad = np.zeros_like(pred)
    grad[ok] = -dcos[ok] / s[ok, None]
    return angle, grad


def rotation_loss(pred, gt) -> tuple[float, np.ndarray]:
    angle, grad = rotation_loss_batch(pred, gt)
    return float(angle[0]), grad[0]


def _kl_bernoulli(g_hat: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # cross-entropy minus the target entropy: zero when g_hat == g, same gradient
    p = np.clip(g_hat, BCE_EPS, 1.0 - BCE_EPS)
    q = np.clip(g, BCE_EPS, 1.0 - BCE_EPS)
    value = q * np.log(q / p) + (1.0 - q) * np.log((1.0 - q) / (1.0 - p))
    grad = np.where(p == g_hat, -q / p + (1.0 - q) / (1.0 - p), 0.0)
    return np.maximum(value, 0.0), grad


def mesh_loss_batch(pred: np.ndarray, gt: np.ndarray, w: LossWeights = LossWeights()):
    """Mesh loss over ``(N, 83)`` parameter vectors.

    Returns ``(values (N,), grads (N, 83), terms)``; ``terms`` maps
    ``theta, alpha, beta, tau, g`` to unweighted per-sample components.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, N_PARAMS)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, N_PARAMS)
    n = len(pred)
    grad = np.zeros_like(pred)

    # rows 0..21 of each sample are theta, row 22 is alpha
    rp = np.concatenate([pred[:, 16:82].reshape(n, N_JOINTS, 3), pred[:, None, 0:3]], axis=1)
    rg = np.concatenate([gt[:, 16:82].reshape(n, N_JOINTS, 3), gt[:, None, 0:3]], axis=1)
    angle, dangle = rotation_loss_batch(rp.reshape(-1, 3), rg.reshape(-1, 3))
    angle = angle.reshape(n, N_JOINTS + 1)
    dangle = dangle.reshape(n, N_JOINTS + 1, 3)
    theta_val = angle[:, :N_JOINTS].mean(axis=1)
    alpha_val = angle[:, N_JOINTS]
    grad[:, 16:82] = (w.lambda_theta / N_JOINTS) * dangle[:, :N_JOINTS].reshape(n, -1)
    grad[:, 0:3] = w.lambda_alpha * dangle[:, N_JOINTS]

    db = pred[:, 3:13] - gt[:, 3:13]
    beta_val = np.einsum("ni,ni->n", db, db)
    grad[:, 3:13] = 2.0 * w.lambda_beta * db

    dt = pred[:, 13:16] - gt[:, 13:16]
    tau_val = np.abs(dt).sum(axis=1)
    grad[:, 13:16] = w.lambda_tau * np.sign(dt)

    g_val, dg = _kl_bernoulli(pred[:, 82], gt[:, 82])
    grad[:, 82] = w.lambda_g * dg

    terms = {"theta": theta_val, "alpha": alpha_val, "beta": beta_val, "tau": tau_val, "g": g_val}
    value = (w.lambda_theta * theta_val + w.lambda_alpha * alpha_val + w.lambda_beta * beta_val
             + w.lambda_tau * tau_val + w.lambda_g * g_val)
    return value, grad, terms


def mesh_loss(pred: BodyParams, gt: BodyParams, w: LossWeights = LossWeights()):
    """Weighted mesh loss and its gradient with respect to ``pred.to_vector()``.

    Rotation terms use the mean geodesic angle over the 22 pose entries
    (and the single root entry); the L1 subgradient at 0 is 0. Returns
    ``(value, grad, terms)``.
    """
    value, grad, terms = mesh_loss_batch(pred.to_vector()[None], gt.to_vector()[None], w)
    return float(value[0]), grad[0], {k: float(v[0]) for k, v in terms.items()}


def bev_loss(pred_xy, gt_tau) -> tuple[float, np.ndarray]:
    """``|x - tau_x| + |y - tau_y|`` and its (sub)gradient in ``pred_xy``."""
    d = np.asarray(pred_xy, dtype=np.float64)[:2] - np.asarray(gt_tau, dtype=np.float64)[:2]
    return float(np.abs(d).sum()), np.sign(d)


def total_loss(pred: BodyParams, pred_xy, gt: BodyParams, w: LossWeights = LossWeights()):
    """``lambda_2d * L2D + lambda_mesh * Lmesh``.

    Returns ``(value, grad_params, grad_xy)``.
    """
    l2d, g2d = bev_loss(pred_xy, gt.tau)
    lmesh, gmesh, _ = mesh_loss(pred, gt, w)
    return w.lambda_2d * l2d + w.lambda_mesh * lmesh, w.lambda_mesh * gmesh, w.lambda_2d * g2d


# --------------------------------------------------------------------------
# binary record for the mesh modality

PARAMS_MAGIC = b"M4BP"
PARAMS_VERSION = 1
_PARAMS_HEADER = struct.Struct("<4sHH")
PARAMS_RECORD_SIZE = _PARAMS_HEADER.size + 4 * N_PARAMS


def serialize_params(p: BodyParams) -> bytes:
    return _PARAMS_HEADER.pack(PARAMS_MAGIC, PARAMS_VERSION, N_PARAMS) + p.to_vector().astype("<f4").tobytes()


def deserialize_params(buf) -> BodyParams:
    buf = bytes(buf)
    if len(buf) != PARAMS_RECORD_SIZE:
        raise CorruptStreamError(f"body record has {len(buf)} bytes, expected {PARAMS_RECORD_SIZE}",
                                 min(len(buf), PARAMS_RECORD_SIZE))
    magic, version, n = _PARAMS_HEADER.unpack_from(buf)
    if magic != PARAMS_MAGIC:
        raise CorruptStreamError(f"bad magic {magic!r}", 0)
    if version != PARAMS_VERSION or n != N_PARAMS:
        raise CorruptStreamError(f"unsupported body record version {version} / count {n}", 4)
    v = np.frombuffer(buf, dtype="<f4", offset=_PARAMS_HEADER.size).astype(np.float64)
    try:
        return BodyParams.from_vector(v)
    except InvalidArgumentError as exc:
        raise CorruptStreamError(str(exc), _PARAMS_HEADER.size) from None
