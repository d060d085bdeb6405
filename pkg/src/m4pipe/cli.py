"""``m4pipe`` command line.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 internal error.
Diagnostics go to stderr; data goes to files or stdout.

A dataset directory (``--store DIR``) holds ``rt.m4db`` (M4SP frames),
``gt.m4db`` (body parameters), optionally ``pc.m4db`` (CFAR points),
``markers/`` (MoCap CSVs) and ``sequences.json``. A raw tree holds the same
samples one file each: ``rt/Sxxx/Axxx/ffffff.m4rt`` (dense dumps) and
``gt/Sxxx/Axxx/ffffff.m4bp``.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from itertools import product
from pathlib import Path

import numpy as np

from . import calib, codec, metrics, store
from .body import BodyModel, deserialize_params, serialize_params
from .cfar import CfarConfig, cfar_detect, encode_points
from .errors import M4Error, InvalidArgumentError
from .localize import LinearRegressor, fit_regressor, predict
from .sim import ScenarioConfig, generate_sequence
from .sync import MOCAP_RATE, SENSOR_RATE, TRIGGER_THRESHOLD, MarkerTrack, align_frames, detect_trigger
from .tensor import GridGeometry, RadarTensor, stack_window

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

MODALITIES = {"rt": ".m4rt", "gt": ".m4bp"}
FAMILY_BY_GROUP = {"P1": "in_place", "P2": "sit_in_place", "P3": "non_in_place"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def threads() -> int:
    """Worker cap from M4PIPE_THREADS; 0 or unset means one per CPU."""
    raw = os.environ.get("M4PIPE_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise InvalidArgumentError(f"M4PIPE_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise InvalidArgumentError("M4PIPE_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def _map(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def _load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidArgumentError(f"{path}: {exc}") from None


def _store_file(path, modality: str) -> Path:
    p = Path(path)
    return p / f"{modality}.m4db" if p.is_dir() else p


def _grid_from(d: dict) -> GridGeometry:
    unknown = set(d) - {"dims", "origin", "pitch"}
    if unknown:
        raise InvalidArgumentError(f"unknown [grid] keys: {sorted(unknown)}")
    kw = {k: tuple(v) for k, v in d.items()}
    return GridGeometry(**kw)


def scenarios_from_config(cfg: dict, seed: int | None = None) -> tuple[GridGeometry, list]:
    """Expand a simulation config into a grid and a list of scenarios.

    Tables: ``[grid]`` (optional), ``[defaults]`` (ScenarioConfig fields),
    ``[sweep]`` with ``subjects`` and ``actions`` lists, and ``[[sequence]]``
    entries of per-clip overrides. A sweep clip takes its motion family
    from the action's protocol group unless the defaults set one, and its
    seed from the base seed, subject and action.
    """
    unknown = set(cfg) - {"grid", "defaults", "sweep", "sequence"}
    if unknown:
        raise InvalidArgumentError(f"unknown config sections: {sorted(unknown)}")
    grid = _grid_from(cfg.get("grid", {}))
    defaults = dict(cfg.get("defaults", {}))
    if seed is not None:
        defaults["seed"] = seed
    base = ScenarioConfig.from_dict(defaults)
    out = []
    sweep = cfg.get("sweep")
    if sweep is not None:
        unknown = set(sweep) - {"subjects", "actions"}
        if unknown:
            raise InvalidArgumentError(f"unknown [sweep] keys: {sorted(unknown)}")
        for s, a in product(sweep.get("subjects", [1]), sweep.get("actions", [0])):
            family = defaults.get("family") or FAMILY_BY_GROUP[metrics.action_group(int(a))]
            out.append(base.with_(subject=int(s), action=int(a), family=family,
                                  seed=base.seed * 1_000_003 + int(s) * 1000 + int(a)))
    for entry in cfg.get("sequence", []):
        merged = dict(defaults)
        merged.update(entry)
        out.append(ScenarioConfig.from_dict(merged))
    if not out:
        out.append(base)
    clips = [(c.subject, c.action) for c in out]
    if len(set(clips)) != len(clips):
        raise InvalidArgumentError("two sequences share the same (subject, action)")
    return grid, out


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    grid, scenarios = scenarios_from_config(_load_toml(args.config), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = BodyModel()
    workers = threads()
    rt_entries, gt_entries, meta = [], [], []
    (out / "markers").mkdir(exist_ok=True)
    for c in scenarios:
        seq = generate_sequence(c, grid, model, workers=workers)
        for key, frame, gt in zip(seq.keys, seq.frames, seq.gt):
            if args.format == "raw":
                _write_raw(out, "rt", key, frame.to_dense_bytes())
                _write_raw(out, "gt", key, serialize_params(gt))
            else:
                rt_entries.append((key, codec.encode(frame)))
                gt_entries.append((key, serialize_params(gt)))
        seq.marker_track.to_csv(out / "markers" / f"S{c.subject:03d}_A{c.action:03d}.csv")
        meta.append({"subject": c.subject, "action": c.action, "family": c.family, "seed": c.seed,
                     "frames": len(seq.frames), "trigger_index": seq.trigger_index})
        print(f"simulated S{c.subject:03d} A{c.action:03d}: {len(seq.frames)} frames", file=sys.stderr)
    if args.format == "store":
        store.build(out / "rt.m4db", rt_entries, "rt")
        store.build(out / "gt.m4db", gt_entries, "gt")
    (out / "sequences.json").write_text(json.dumps(meta, indent=2) + "\n")
    return 0


def _write_raw(root: Path, modality: str, key, blob: bytes):
    p = store.baseline_path(root / modality, key).with_suffix(MODALITIES[modality])
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(blob)


def _scan_raw(root: Path, modality: str):
    base = root / modality
    if not base.is_dir():
        return
    for p in sorted(base.glob(f"S*/A*/*{MODALITIES[modality]}")):
        try:
            key = store.SampleKey(int(p.parent.parent.name[1:]), int(p.parent.name[1:]), int(p.stem))
        except ValueError:
            raise InvalidArgumentError(f"cannot parse sample key from {p}") from None
        yield key, p


def cmd_pack(args) -> int:
    raw, out = Path(args.raw), Path(args.out)
    if not raw.is_dir():
        raise InvalidArgumentError(f"{raw} is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    packed = 0
    for modality in args.modality.split(","):
        if modality not in MODALITIES:
            raise InvalidArgumentError(f"unknown modality {modality!r}")
        if modality == "rt":
            entries = ((k, codec.encode(RadarTensor.from_dense_bytes(p.read_bytes()))) for k, p in _scan_raw(raw, "rt"))
        else:
            entries = ((k, serialize_params(deserialize_params(p.read_bytes()))) for k, p in _scan_raw(raw, "gt"))
        path = store.build(out / f"{modality}.m4db", entries, modality)
        with store.Store(path) as s:
            print(f"packed {len(s)} {modality} samples into {path}", file=sys.stderr)
            packed += len(s)
    for extra in ("markers", "sequences.json"):
        src = raw / extra
        if src.is_dir() and src.resolve() != (out / extra).resolve():
            shutil.copytree(src, out / extra, dirs_exist_ok=True)
        elif src.is_file() and src.resolve() != (out / extra).resolve():
            shutil.copyfile(src, out / extra)
    return 0


def cmd_unpack(args) -> int:
    out = Path(args.out)
    for modality in args.modality.split(","):
        if modality not in MODALITIES:
            raise InvalidArgumentError(f"unknown modality {modality!r}")
        with store.Store(_store_file(args.store, modality)) as s:
            for key, blob in s.scan():
                if modality == "rt":
                    blob = codec.decode(blob).to_dense_bytes()
                _write_raw(out, modality, key, blob)
    return 0


def cmd_get(args) -> int:
    key = store.SampleKey(args.subject, args.action, args.frame)
    with store.Store(_store_file(args.store, args.modality)) as s:
        blob = s.get(key)
    if args.json:
        text = json.dumps(_describe(args.modality, blob), indent=2) + "\n"
        _emit(text.encode(), args.out)
        return 0
    if args.dense and args.modality == "rt":
        blob = codec.decode(blob).to_dense_bytes()
    _emit(blob, args.out)
    return 0


def _describe(modality: str, blob: bytes) -> dict:
    if modality == "gt":
        p = deserialize_params(blob)
        joints = BodyModel().forward_joints(p)
        return {"alpha": p.alpha.tolist(), "beta": p.beta.tolist(), "tau": p.tau.tolist(), "g": float(p.g),
                "theta": np.asarray(p.theta).tolist(), "joints": joints.tolist()}
    if modality == "rt":
        t = codec.decode(blob)
        return {"dims": list(t.geometry.dims), "origin": list(t.geometry.origin), "pitch": list(t.geometry.pitch),
                "nnz": int(np.count_nonzero(t.values)), "max": float(t.values.max())}
    return {"bytes": len(blob)}


def _emit(data: bytes, out):
    if out:
        Path(out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


def cmd_cfar(args) -> int:
    cfg = dict(_load_toml(args.config)) if args.config else {}
    cfg = cfg.get("cfar", cfg)
    if args.threshold_factor is not None:
        cfg["threshold_factor"] = args.threshold_factor
    if args.max_points is not None:
        cfg["max_points"] = args.max_points
    c = CfarConfig.from_dict(cfg)
    if args.input:
        blob = Path(args.input).read_bytes()
        t = RadarTensor.from_dense_bytes(blob) if blob[:4] == b"M4RT" else codec.decode(blob)
        pts = cfar_detect(t, c).as_array()
        lines = ["x,y,z,intensity"] + [",".join(f"{v:.6g}" for v in row) for row in pts]
        _emit(("\n".join(lines) + "\n").encode(), args.out)
        return 0
    if not args.store:
        raise UsageError("cfar needs --store or --input")
    src = _store_file(args.store, "rt")
    out = Path(args.out) if args.out else src.with_name("pc.m4db")
    with store.Store(src) as s:
        items = list(s.scan())
    blobs = _map(lambda kv: (kv[0], encode_points(cfar_detect(codec.decode(kv[1]), c))), items, threads())
    store.build(out, blobs, "pc")
    print(f"wrote {len(blobs)} point clouds to {out}", file=sys.stderr)
    return 0


def cmd_calibrate(args) -> int:
    if args.pairs:
        d = json.loads(Path(args.pairs).read_text())
        t = calib.solve_rigid_3d(d["src"], d["dst"])
        res = np.linalg.norm(t.apply(d["src"]) - np.asarray(d["dst"], dtype=np.float64), axis=1)
        result = {"rotation": t.rotation.reshape(-1).tolist(), "translation": t.translation.tolist(),
                  "mean_residual_m": float(res.mean())}
    else:
        if not (args.intrinsics and args.points):
            raise UsageError("calibrate needs --intrinsics and --points (or --pairs)")
        k = calib.load_intrinsics(args.intrinsics)
        result = calib.solve_pnp(k, calib.load_correspondences(args.points)).to_dict()
    _emit((json.dumps(result, indent=2) + "\n").encode(), args.out)
    return 0


def cmd_sync(args) -> int:
    track = MarkerTrack.from_csv(args.track, args.mocap_rate)
    trig = detect_trigger(track, args.threshold)
    lines = [f"# trigger_index {trig}"]
    if args.frames:
        idx, valid = align_frames(track.rate, args.sensor_rate, trig, args.frames, len(track.times))
        lines.append("sensor_frame,mocap_index,valid")
        lines += [f"{j},{i},{int(v)}" for j, (i, v) in enumerate(zip(idx, valid))]
    else:
        lines.append(str(trig))
    _emit(("\n".join(lines) + "\n").encode(), args.out)
    return 0


def _load_split(args, keys):
    spec = metrics.SplitSpec(args.split, seed=args.seed,
                             held_out=tuple(int(x) for x in args.held_out.split(",")) if args.held_out else ())
    return metrics.make_split(keys, spec)


def _samples(root, keys):
    """``(key, FrameStack, gt)`` for each key; stacks use the clip's earlier frames."""
    wanted = {}
    for k in keys:
        wanted.setdefault((k.subject, k.action), set()).add(k.frame)
    out = []
    with store.Store(_store_file(root, "rt")) as rs, store.Store(_store_file(root, "gt")) as gs:
        for (s, a), frames in sorted(wanted.items()):
            clip = list(rs.scan(s, a))
            tensors = [codec.decode(b) for _, b in clip]
            for n, (key, _) in enumerate(clip):
                if key.frame in frames:
                    out.append((key, stack_window(tensors, n), deserialize_params(gs.get(key))))
    return out


def cmd_fit(args) -> int:
    with store.Store(_store_file(args.store, "gt")) as gs:
        keys = gs.keys()
    part = getattr(_load_split(args, keys), args.part)
    if not part:
        raise InvalidArgumentError(f"the {args.part} part of the split is empty")
    data = [(stack, gt) for _, stack, gt in _samples(args.store, part)]
    model = fit_regressor(data, steps=args.steps, lr=args.lr)
    Path(args.out).write_bytes(model.to_bytes())
    print(f"fitted on {len(data)} samples: loss {model.loss_trace[0]:.6g} -> {model.loss_trace[-1]:.6g}",
          file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    with store.Store(_store_file(args.store, "gt")) as gs:
        keys = gs.keys()
    test = _load_split(args, keys).test
    model = LinearRegressor.from_bytes(Path(args.model).read_bytes()) if args.model else LinearRegressor.zeros()
    records = [metrics.EvalRecord(k, predict(stack, model), gt) for k, stack, gt in _samples(args.store, test)]
    names = ["P1", "P2", "P3", "ALL"] if args.protocol.lower() == "each" else args.protocol.split(",")
    body = BodyModel()
    rows = [metrics.aggregate(records, metrics.ProtocolSpec.named(n), args.split.upper(), body,
                              include_root=not args.no_root) for n in names]
    _emit(metrics.rows_to_csv(rows).encode(), args.out)
    return 0


def cmd_bench(args) -> int:
    path = _store_file(args.store, args.modality)
    tmp = None
    baseline = Path(args.baseline) if args.baseline else None
    try:
        if baseline is None:
            tmp = tempfile.mkdtemp(prefix="m4bench-")
            baseline = Path(tmp)
        if not baseline.exists() or not any(baseline.iterdir()):
            with store.Store(path) as s:
                store.write_baseline_tree(baseline, s.scan())
        r = store.bench_access(path, baseline, n=args.n, seed=args.seed)
    finally:
        if tmp:
            shutil.rmtree(tmp, ignore_errors=True)
    lines = ["layout,pass,lookups,seconds,lookups_per_s,bytes_per_s"]
    for name, s in r.rows():
        layout, phase = name.split("_")
        lines.append(f"{layout},{phase},{s.lookups},{s.seconds:.6f},{s.lookups_per_s:.1f},{s.bytes_per_s:.1f}")
    _emit(("\n".join(lines) + "\n").encode(), args.out)
    return 0


def cmd_split(args) -> int:
    with store.Store(_store_file(args.store, "gt")) as gs:
        keys = gs.keys()
    sp = _load_split(args, keys)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in sp.parts().items():
        metrics.write_manifest(out / f"{name}.txt", part)
    print(f"train {len(sp.train)}, val {len(sp.val)}, test {len(sp.test)}", file=sys.stderr)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="m4pipe", description="Radar human-sensing data pipeline")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="render synthetic sequences")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("store", "raw"), default="store")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("pack", help="build stores from a raw per-file tree")
    s.add_argument("--raw", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--modality", default="rt,gt")
    s.set_defaults(fn=cmd_pack)

    s = sub.add_parser("unpack", help="expand stores into a raw per-file tree")
    s.add_argument("--store", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--modality", default="rt,gt")
    s.set_defaults(fn=cmd_unpack)

    s = sub.add_parser("get", help="fetch one sample")
    s.add_argument("--store", required=True)
    s.add_argument("--subject", type=int, required=True)
    s.add_argument("--action", type=int, required=True)
    s.add_argument("--frame", type=int, required=True)
    s.add_argument("--modality", default="rt")
    s.add_argument("--dense", action="store_true", help="emit rt frames as dense M4RT dumps")
    s.add_argument("--json", action="store_true", help="emit a readable summary instead of bytes")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_get)

    s = sub.add_parser("cfar", help="CA-CFAR detection")
    s.add_argument("--store", help="dataset directory or rt store; writes pc.m4db beside it")
    s.add_argument("--input", help="single M4SP or M4RT file; writes CSV")
    s.add_argument("--config")
    s.add_argument("--threshold-factor", type=float)
    s.add_argument("--max-points", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_cfar)

    s = sub.add_parser("calibrate", help="solve camera extrinsics")
    s.add_argument("--intrinsics")
    s.add_argument("--points")
    s.add_argument("--pairs", help="3D-3D pairs {src, dst} for a rigid fit")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("sync", help="detect the MoCap trigger and align frames")
    s.add_argument("--track", required=True)
    s.add_argument("--threshold", type=float, default=TRIGGER_THRESHOLD)
    s.add_argument("--mocap-rate", type=float, default=MOCAP_RATE)
    s.add_argument("--sensor-rate", type=float, default=SENSOR_RATE)
    s.add_argument("--frames", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sync)

    for name, fn, help_ in (("fit", cmd_fit, "train the linear regressor"),
                            ("eval", cmd_eval, "evaluate on the test split"),
                            ("split", cmd_split, "write split manifests")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--store", required=True)
        s.add_argument("--split", default="s1", choices=("s1", "s2", "s3", "random", "cross_subject", "cross_action"))
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--held-out", help="comma-separated subjects (s2) or actions (s3)")
        s.set_defaults(fn=fn)
        if name == "fit":
            s.add_argument("--out", required=True)
            s.add_argument("--steps", type=int, default=2000)
            s.add_argument("--lr", type=float, default=1e-2)
            s.add_argument("--part", choices=("train", "val", "test"), default="train")
        elif name == "eval":
            s.add_argument("--protocol", default="all", help="p1, p2, p3, all, each, or a comma list")
            s.add_argument("--model")
            s.add_argument("--no-root", action="store_true", help="exclude alpha from MRE")
            s.add_argument("--out")
        else:
            s.add_argument("--out", required=True)

    s = sub.add_parser("bench", help="store vs per-file random access")
    s.add_argument("--store", required=True)
    s.add_argument("--modality", default="rt")
    s.add_argument("--baseline", help="per-file tree; created from the store when missing or empty")
    s.add_argument("--n", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_bench)
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except M4Error as exc:
        print(f"m4pipe: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"m4pipe: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"m4pipe: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
