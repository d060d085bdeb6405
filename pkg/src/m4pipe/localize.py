"""Two-stage RT front end: BEV localization, RoI pooling and a linear HMR head.

The first stage is deterministic: collapse the stack to BEV, smooth, and
take the intensity-weighted centroid of the half-peak blob around the
global maximum. The second stage crops the 3D RoI there, pools it into a
fixed feature vector, and maps that linearly to body parameters. The
linear head is trained by full-batch gradient descent on the joint BEV +
mesh objective.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .body import N_PARAMS, BodyParams, LossWeights, mesh_loss_batch
from .errors import CorruptStreamError, InvalidArgumentError, NoTargetError, TrainingDivergedError
from .tensor import DEFAULT_ROI, FrameStack, bev_collapse, crop_roi

ROOT_HEIGHT = 0.9
N_FEATURES = DEFAULT_ROI[2] + 7  # z-slab sums, 3 means, 3 variances, total energy


@dataclass(frozen=True)
class BevLocalization:
    xy: tuple
    peak_intensity: float
    confidence: float


def bev_map(stack: FrameStack) -> np.ndarray:
    """Channel-summed BEV map smoothed with a 3x3 box filter."""
    bev = bev_collapse(stack).channels.sum(axis=2, dtype=np.float64)
    return ndimage.uniform_filter(bev, size=3, mode="constant", cval=0.0)


def localize_bev(stack: FrameStack) -> BevLocalization:
    sm = bev_map(stack)
    peak = float(sm.max())
    if not peak > 0:
        raise NoTargetError("frame stack carries no energy")
    pi, pj = np.unravel_index(int(np.argmax(sm)), sm.shape)
    labels, _ = ndimage.label(sm > 0.5 * peak, structure=np.ones((3, 3)))
    region = labels == labels[pi, pj]
    w = sm[region]
    ii, jj = np.nonzero(region)
    ci = float(np.dot(w, ii) / w.sum())
    cj = float(np.dot(w, jj) / w.sum())
    g = stack.geometry
    x = g.origin[0] + ci * g.pitch[0]
    y = g.origin[1] + cj * g.pitch[1]
    rest = sm[~region]
    background = float(np.median(rest)) if rest.size else 0.0
    return BevLocalization((x, y), peak, peak / (peak + background))


def extract_roi_features(stack: FrameStack, loc: BevLocalization, roi=DEFAULT_ROI) -> np.ndarray:
    """Pool the RoI crop into a fixed vector.

    Layout: ``roi[2]`` per-z-slab energy sums, intensity-weighted world means
    (x, y, z), intensity-weighted variances (x, y, z), total energy. Frames
    of the stack are summed first. An empty crop gives all zeros.
    """
    crop = crop_roi(stack, loc.xy, roi)
    vol = np.sum([f.values for f in crop.frames], axis=0, dtype=np.float64)
    slabs = vol.sum(axis=(0, 1))
    total = float(vol.sum())
    feats = np.zeros(len(slabs) + 7)
    feats[: len(slabs)] = slabs
    feats[-1] = total
    if total > 0:
        g = crop.geometry
        for ax in range(3):
            coord = g.origin[ax] + np.arange(g.dims[ax]) * g.pitch[ax]
            marg = vol.sum(axis=tuple(a for a in range(3) if a != ax))
            mean = float(marg @ coord / total)
            feats[len(slabs) + ax] = mean
            feats[len(slabs) + 3 + ax] = float(marg @ (coord - mean) ** 2 / total)
    return feats


def design_row(feats: np.ndarray, loc: BevLocalization) -> np.ndarray:
    """Regressor input: energy-normalised slabs, means relative to the localization, spreads, log energy."""
    n = len(feats) - 7
    total = feats[-1]
    out = np.empty(len(feats))
    out[:n] = feats[:n] / total if total > 0 else 0.0
    out[n] = feats[n] - loc.xy[0]
    out[n + 1] = feats[n + 1] - loc.xy[1]
    out[n + 2] = feats[n + 2]
    out[n + 3:n + 6] = np.sqrt(np.maximum(feats[n + 3:n + 6], 0.0))
    out[-1] = np.log(max(total, 1e-30))
    return out


@dataclass
class LinearRegressor:
    """``params = base(loc) + W @ ((row - shift) / scale) + b``."""

    weights: np.ndarray
    bias: np.ndarray
    shift: np.ndarray
    scale: np.ndarray
    root_height: float = ROOT_HEIGHT
    loss_trace: list = field(default_factory=list)

    @classmethod
    def zeros(cls, n_in: int = N_FEATURES, root_height: float = ROOT_HEIGHT) -> "LinearRegressor":
        return cls(np.zeros((N_PARAMS, n_in)), np.zeros(N_PARAMS), np.zeros(n_in), np.ones(n_in), root_height)

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    def normalise(self, rows: np.ndarray) -> np.ndarray:
        return (rows - self.shift) / self.scale

    def outputs(self, rows: np.ndarray) -> np.ndarray:
        return self.normalise(rows) @ self.weights.T + self.bias

    # checkpoint: "M4LR", u16 version, u16 reserved, u32 n_out, u32 n_in, f32 root height,
    # then f32 weights (row-major), bias, shift, scale
    _HEAD = struct.Struct("<4sHHIIf")

    def to_bytes(self) -> bytes:
        body = np.concatenate([self.weights.reshape(-1), self.bias, self.shift, self.scale])
        return self._HEAD.pack(b"M4LR", 1, 0, N_PARAMS, self.n_in, self.root_height) + body.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf) -> "LinearRegressor":
        buf = bytes(buf)
        if len(buf) < cls._HEAD.size:
            raise CorruptStreamError("model checkpoint truncated", len(buf))
        magic, version, _, n_out, n_in, root = cls._HEAD.unpack_from(buf)
        if magic != b"M4LR" or version != 1:
            raise CorruptStreamError("not a model checkpoint", 0)
        if n_out != N_PARAMS:
            raise CorruptStreamError(f"checkpoint has {n_out} outputs, expected {N_PARAMS}", 8)
        expected = cls._HEAD.size + 4 * (n_out * n_in + n_out + 2 * n_in)
        if len(buf) != expected:
            raise CorruptStreamError(f"checkpoint has {len(buf)} bytes, expected {expected}", min(len(buf), expected))
        v = np.frombuffer(buf, dtype="<f4", offset=cls._HEAD.size).astype(np.float64)
        w, rest = v[: n_out * n_in].reshape(n_out, n_in), v[n_out * n_in:]
        return cls(w, rest[:n_out], rest[n_out:n_out + n_in], rest[n_out + n_in:], float(root))


def _base_vectors(locs, root_height: float) -> np.ndarray:
    base = np.zeros((len(locs), N_PARAMS))
    for n, loc in enumerate(locs):
        base[n, 13:16] = (loc.xy[0], loc.xy[1], root_height)
    base[:, 82] = 0.5
    return base


def _to_params(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp the gender entry; returns vectors and d(vector)/d(raw) for it."""
    out = raw.copy()
    out[:, 82] = np.clip(raw[:, 82], 0.0, 1.0)
    dg = ((raw[:, 82] > 0.0) & (raw[:, 82] < 1.0)).astype(np.float64)
    return out, dg


def _objective(model: LinearRegressor, z: np.ndarray, base: np.ndarray, gt: np.ndarray, w: LossWeights):
    raw = base + z @ model.weights.T + model.bias
    pred, dg = _to_params(raw)
    lmesh, gmesh, _ = mesh_loss_batch(pred, gt, w)
    # the BEV estimate is the localization refined by the regressed tau residual
    dxy = pred[:, 13:15] - gt[:, 13:15]
    l2d = np.abs(dxy).sum(axis=1)
    value = float(np.mean(w.lambda_2d * l2d + w.lambda_mesh * lmesh))
    gout = w.lambda_mesh * gmesh
    gout[:, 13:15] += w.lambda_2d * np.sign(dxy)
    gout[:, 82] *= dg
    gout /= len(z)
    return value, gout.T @ z, gout.sum(axis=0)


def prepare(dataset) -> tuple[list, np.ndarray, np.ndarray]:
    """Localize and pool every ``(FrameStack, BodyParams)`` pair once."""
    locs, rows, gts = [], [], []
    for stack, gt in dataset:
        loc = localize_bev(stack)
        locs.append(loc)
        rows.append(design_row(extract_roi_features(stack, loc), loc))
        gts.append(gt.to_vector())
    return locs, np.array(rows), np.array(gts)


def fit_regressor(dataset, w: LossWeights = LossWeights(), steps: int = 2000, lr: float = 1e-2,
                  decay: float = 0.1, decay_every: int | None = None,
                  root_height: float = ROOT_HEIGHT, prepared=None) -> LinearRegressor:
    """Full-batch gradient descent from a zero model.

    The learning rate is multiplied by ``decay`` every ``decay_every``
    steps (default: a quarter of ``steps``). ``loss_trace`` on the returned
    model holds the objective before each step plus the final value.
    """
    if not dataset and prepared is None:
        raise InvalidArgumentError("cannot fit on an empty dataset")
    locs, rows, gts = prepared if prepared is not None else prepare(dataset)
    model = LinearRegressor.zeros(rows.shape[1], root_height)
    model.shift = rows.mean(axis=0)
    std = rows.std(axis=0)
    model.scale = np.where(std > 1e-12, std, 1.0)
    z = model.normalise(rows)
    base = _base_vectors(locs, root_height)
    decay_every = decay_every or max(1, steps // 4)
    trace = []
    step_lr = lr
    for step in range(steps):
        if step and step % decay_every == 0:
            step_lr *= decay
        value, gw, gb = _objective(model, z, base, gts, w)
        if not np.isfinite(value):
            raise TrainingDivergedError(step)
        trace.append(value)
        model.weights = model.weights - step_lr * gw
        model.bias = model.bias - step_lr * gb
    value = _objective(model, z, base, gts, w)[0]
    if not np.isfinite(value):
        raise TrainingDivergedError(steps)
    trace.append(value)
    model.loss_trace = trace
    return model


def predict(stack: FrameStack, model: LinearRegressor | None = None) -> BodyParams:
    model = model or LinearRegressor.zeros()
    loc = localize_bev(stack)
    row = design_row(extract_roi_features(stack, loc), loc)
    raw = _base_vectors([loc], model.root_height) + model.outputs(row[None])
    vec, _ = _to_params(raw)
    return BodyParams.from_vector(vec[0]).canonical()


def predict_with_localization(stack: FrameStack, model: LinearRegressor | None = None):
    """Like :func:`predict` but also returns the BEV localization used."""
    model = model or LinearRegressor.zeros()
    loc = localize_bev(stack)
    return predict(stack, model), loc
