"""World-frame evaluation metrics, protocol/split partitioning, and table aggregation.

All distances are reported in millimeters and angles in degrees. No root
or Procrustes alignment is applied anywhere.
"""

from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body import BodyModel, BodyParams
from .errors import InfeasibleSplitError, InvalidArgumentError
from .geometry import axis_angle_to_rot_batch, geodesic_angle_batch
from .store import SampleKey

METRIC_NAMES = ("MVE", "MJE", "MRE", "TE")
SPLIT_KINDS = ("random", "cross_subject", "cross_action")
SPLIT_ALIASES = {"s1": "random", "s2": "cross_subject", "s3": "cross_action"}

# action catalogue: ids 0-29 in-place, 30-34 sit-in-place, 35-49 non-in-place
PROTOCOL_ACTIONS = {
    "P1": frozenset(range(0, 30)),
    "P2": frozenset(range(30, 35)),
    "P3": frozenset(range(35, 50)),
}
PROTOCOL_ACTIONS["ALL"] = PROTOCOL_ACTIONS["P1"] | PROTOCOL_ACTIONS["P2"] | PROTOCOL_ACTIONS["P3"]


def _paired(pred, gt, what: str):
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise InvalidArgumentError(f"{what}: need matching (n, 3) arrays, got {a.shape} and {b.shape}")
    if len(a) == 0:
        raise InvalidArgumentError(f"{what}: no points")
    return a, b


def mve(pred_vertices, gt_vertices) -> float:
    """Mean per-vertex distance in mm (inputs in meters)."""
    a, b = _paired(pred_vertices, gt_vertices, "mve")
    return float(np.mean(np.linalg.norm(a - b, axis=1)) * 1000.0)


def mje(pred_joints, gt_joints) -> float:
    a, b = _paired(pred_joints, gt_joints, "mje")
    if len(a) != 22:
        raise InvalidArgumentError(f"mje expects 22 joints, got {len(a)}")
    return float(np.mean(np.linalg.norm(a - b, axis=1)) * 1000.0)


def mre(pred: BodyParams, gt: BodyParams, include_root: bool = True) -> float:
    """Mean geodesic angle over the 22 joint rotations (plus alpha by default), degrees."""
    pa = np.asarray(pred.theta).reshape(-1, 3)
    ga = np.asarray(gt.theta).reshape(-1, 3)
    if include_root:
        pa = np.vstack([pa, pred.alpha])
        ga = np.vstack([ga, gt.alpha])
    ang = geodesic_angle_batch(axis_angle_to_rot_batch(pa), axis_angle_to_rot_batch(ga))
    return float(np.degrees(np.mean(ang)))


def te(pred_tau, gt_tau) -> float:
    d = np.asarray(pred_tau, dtype=np.float64) - np.asarray(gt_tau, dtype=np.float64)
    if d.shape != (3,):
        raise InvalidArgumentError("te expects two 3-vectors")
    return float(np.linalg.norm(d) * 1000.0)


@dataclass(frozen=True)
class EvalRecord:
    key: SampleKey
    pred: BodyParams
    gt: BodyParams


def record_metrics(rec: EvalRecord, model: BodyModel | None = None, include_root: bool = True) -> dict:
    model = model or BodyModel()
    return {
        "MVE": mve(model.forward_vertices(rec.pred), model.forward_vertices(rec.gt)),
        "MJE": mje(model.forward_joints(rec.pred), model.forward_joints(rec.gt)),
        "MRE": mre(rec.pred, rec.gt, include_root),
        "TE": te(rec.pred.tau, rec.gt.tau),
    }


# --------------------------------------------------------------------------
# protocols and splits


@dataclass(frozen=True)
class ProtocolSpec:
    id: str
    actions: frozenset

    @classmethod
    def named(cls, name: str) -> "ProtocolSpec":
        key = name.upper()
        if key not in PROTOCOL_ACTIONS:
            raise InvalidArgumentError(f"unknown protocol {name!r}; expected one of {sorted(PROTOCOL_ACTIONS)}")
        return cls(key, PROTOCOL_ACTIONS[key])


def action_group(action: int) -> str:
    for name in ("P1", "P2", "P3"):
        if action in PROTOCOL_ACTIONS[name]:
            return name
    raise InvalidArgumentError(f"action {action} is outside the catalogue")


@dataclass(frozen=True)
class SplitSpec:
    kind: str = "random"
    ratios: tuple = (0.75, 0.05, 0.20)
    held_out: tuple = ()  # subjects (cross_subject) or actions (cross_action); empty = sample them
    seed: int = 0

    def __post_init__(self):
        kind = SPLIT_ALIASES.get(self.kind.lower(), self.kind)
        if kind not in SPLIT_KINDS:
            raise InvalidArgumentError(f"unknown split kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        r = tuple(float(x) for x in self.ratios)
        if len(r) != 3 or min(r) < 0 or not math.isclose(sum(r), 1.0, abs_tol=1e-9):
            raise InvalidArgumentError(f"split ratios must be three non-negative values summing to 1, got {r}")
        object.__setattr__(self, "ratios", r)
        object.__setattr__(self, "held_out", tuple(sorted(int(h) for h in self.held_out)))


@dataclass
class Split:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def parts(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def _cut(items: list, fractions, rng: random.Random) -> list:
    """Shuffle and cut ``items`` into consecutive parts of the given fractions.

    Part sizes are rounded cumulatively. The last part gets at least one
    item whenever there are two or more items and its fraction is nonzero.
    """
    items = list(items)
    rng.shuffle(items)
    n = len(items)
    total = sum(fractions)
    bounds, acc = [0], 0.0
    for f in fractions[:-1]:
        acc += f / total if total > 0 else 0.0
        bounds.append(int(math.floor(acc * n + 0.5)))
    bounds.append(n)
    if n >= 2 and fractions[-1] > 0 and bounds[-2] >= n:
        bounds[1:-1] = [min(b, n - 1) for b in bounds[1:-1]]
    return [items[bounds[i]:bounds[i + 1]] for i in range(len(fractions))]


def _expand(clips, by_clip) -> list:
    return sorted(k for c in clips for k in by_clip[c])


def make_split(catalogue, spec: SplitSpec = SplitSpec(), groups: dict | None = None) -> Split:
    """Partition sample keys into train/val/test key lists (each sorted).

    Clips, i.e. (subject, action) pairs, are never divided between parts.
    ``groups`` maps action id to group name and defaults to the P1/P2/P3
    catalogue. Random draws use a seeded shuffle of canonically sorted
    inputs, so the result depends only on the key set and the SplitSpec.
    """
    keys = sorted(set(catalogue))
    if not keys:
        raise InvalidArgumentError("cannot split an empty catalogue")
    rng = random.Random(spec.seed)
    by_clip: dict = {}
    for k in keys:
        by_clip.setdefault((k.subject, k.action), []).append(k)
    clips = sorted(by_clip)
    tr, va, ts = spec.ratios

    if spec.kind == "random":
        parts = _cut(clips, (tr, va, ts), rng)
        return Split(*(_expand(p, by_clip) for p in parts))

    if spec.kind == "cross_subject":
        subjects = sorted({c[0] for c in clips})
        held = set(spec.held_out)
        if not held:
            n = int(math.floor(ts * len(subjects) + 0.5))
            held = set(rng.sample(subjects, max(1, n)))
        if not held & set(subjects):
            raise InfeasibleSplitError("no held-out subject appears in the catalogue")
        if set(subjects) <= held:
            raise InfeasibleSplitError("held-out subjects cover every subject; nothing left to train on")
        test = [c for c in clips if c[0] in held]
        rest = [c for c in clips if c[0] not in held]
        train, val = _cut(rest, (tr, va), rng)
        return Split(_expand(train, by_clip), _expand(val, by_clip), _expand(test, by_clip))

    # cross_action: disjoint action classes, sampled per group
    actions = sorted({c[1] for c in clips})
    grp = groups if groups is not None else {a: action_group(a) for a in actions}
    held = set(spec.held_out)
    if not held:
        by_group: dict = {}
        for a in actions:
            by_group.setdefault(grp[a], []).append(a)
        for name in sorted(by_group):
            members = by_group[name]
            n = int(math.floor(ts * len(members) + 0.5))
            held |= set(rng.sample(members, n))
    if not held & set(actions):
        raise InfeasibleSplitError("no action class is held out for testing")
    if set(actions) <= held:
        raise InfeasibleSplitError("held-out actions cover every class; nothing left to train on")
    test = [c for c in clips if c[1] in held]
    rest = [c for c in clips if c[1] not in held]
    train, val = _cut(rest, (tr, va), rng)
    return Split(_expand(train, by_clip), _expand(val, by_clip), _expand(test, by_clip))


def write_manifest(path, keys) -> None:
    """One ``subject action frame`` line per key, sorted."""
    lines = [f"{k.subject} {k.action} {k.frame}" for k in sorted(keys)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path) -> list:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise InvalidArgumentError(f"{path}:{n}: expected 'subject action frame'")
        out.append(SampleKey(*(int(p) for p in parts)))
    return out


# --------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class TableRow:
    protocol: str
    split: str
    count: int
    values: dict  # metric name -> mean, empty when count == 0

    @property
    def status(self) -> str:
        return "ok" if self.count else "empty"

    def as_dict(self) -> dict:
        row = {"protocol": self.protocol, "split": self.split, "count": self.count, "status": self.status}
        for m in METRIC_NAMES:
            row[m] = f"{self.values[m]:.6f}" if self.count else ""
        return row


def aggregate(records, protocol: ProtocolSpec, split: str = "", model: BodyModel | None = None,
              include_root: bool = True) -> TableRow:
    """Mean of each metric over the records whose action is in the protocol.

    Records are reduced in key order so the result does not depend on
    the order they arrive in.
    """
    model = model or BodyModel()
    chosen = sorted((r for r in records if r.key.action in protocol.actions), key=lambda r: r.key)
    if not chosen:
        return TableRow(protocol.id, split, 0, {})
    per = [record_metrics(r, model, include_root) for r in chosen]
    values = {m: math.fsum(p[m] for p in per) / len(per) for m in METRIC_NAMES}
    return TableRow(protocol.id, split, len(per), values)


CSV_FIELDS = ("protocol", "split", "count", "status") + METRIC_NAMES


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.as_dict())
    return buf.getvalue()
