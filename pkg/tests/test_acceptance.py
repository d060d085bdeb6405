"""Acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py``; the terminal summary lists a
PASS/FAIL line for each.
"""

import json
import math
import struct
import time
import zlib
from fractions import Fraction

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from oracles import cfar_brute_force
from m4pipe import codec, store
from m4pipe.body import BodyParams, LossWeights, bev_loss, mesh_loss, mesh_loss_batch, total_loss
from m4pipe.calib import CameraIntrinsics, Correspondence, chain_vicon_to_radar, solve_pnp
from m4pipe.cfar import CfarConfig, cfar_detect, detection_mask
from m4pipe.cli import run
from m4pipe.errors import StoreCorruptError
from m4pipe.geometry import RigidTransform, geodesic_angle
from m4pipe.localize import LinearRegressor, fit_regressor, localize_bev, predict
from m4pipe.metrics import (
    PROTOCOL_ACTIONS,
    SplitSpec,
    make_split,
    mje,
    mre,
    mve,
    read_manifest,
    te,
    write_manifest,
)
from m4pipe.sim import ScenarioConfig, generate_motion, generate_sequence, render_frame
from m4pipe.store import INDEX_DTYPE, SampleKey
from m4pipe.sync import MarkerTrack, align_frames, detect_trigger
from m4pipe.tensor import FrameStack, GridGeometry, RadarTensor, stack_window

PITCH = 0.05


def test_ac01_codec_roundtrip():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    for n in range(1000):
        dims = (int(rng.integers(1, 122)), int(rng.integers(1, 112)), int(rng.integers(1, 32)))
        if n % 50 == 0:
            dims = (121, 111, 31)
        g = GridGeometry(dims, tuple(rng.uniform(-5, 5, 3)), tuple(rng.uniform(0.01, 0.2, 3)))
        v = np.zeros(dims, np.float32)
        size = v.size
        nnz = int(rng.integers(0, min(size, 5000) + 1))
        idx = rng.choice(size, nnz, replace=False)
        vals = rng.exponential(1.0, nnz).astype(np.float32)
        if nnz >= 3:
            # subnormal, largest finite, smallest normal
            vals[:3] = [np.float32(1e-45), np.finfo(np.float32).max, np.finfo(np.float32).tiny]
        v.reshape(-1)[idx] = vals
        t = RadarTensor(g, v)
        back = codec.decode(codec.encode(t))
        assert back.geometry == t.geometry
        assert back.values.tobytes() == t.values.tobytes()
    assert time.perf_counter() - t0 < 60.0


def _cfar_case(rng):
    dims = (int(rng.integers(3, 16)), int(rng.integers(3, 16)), int(rng.integers(2, 8)))
    v = rng.exponential(1.0, dims)
    v[rng.random(dims) < rng.uniform(0.0, 0.95)] = 0.0
    spikes = rng.integers(0, 4)
    for _ in range(spikes):
        v[tuple(int(rng.integers(0, d)) for d in dims)] = rng.uniform(5, 50)
    guard = tuple(int(rng.integers(0, 3)) for _ in range(3))
    train = tuple(gd + int(rng.integers(1, 4)) for gd in guard)
    c = CfarConfig(guard, train, float(rng.uniform(0.5, 5.0)), float(rng.choice([0.0, 0.0, 0.3, 1.0])),
                   max_points=10**6)
    return RadarTensor(GridGeometry(dims), v.astype(np.float32)), c


def test_ac02_cfar_oracle_equivalence():
    rng = np.random.default_rng(202)
    for _ in range(120):
        t, c = _cfar_case(rng)
        expected = cfar_brute_force(t.values, c.guard, c.train, c.threshold_factor, c.min_intensity)
        assert np.array_equal(detection_mask(t, c), expected)
        pts = cfar_detect(t, c)
        want = {tuple(t.geometry.voxel_to_world(ix)) for ix in zip(*np.nonzero(expected))}
        assert {tuple(p) for p in pts.positions} == want
    for _ in range(50):
        t, c = _cfar_case(rng)
        hi = CfarConfig(c.guard, c.train, c.threshold_factor * rng.uniform(1.0, 3.0), c.min_intensity)
        lo_mask, hi_mask = detection_mask(t, c), detection_mask(t, hi)
        assert not np.any(hi_mask & ~lo_mask)


def test_ac03_sim_point_count():
    c = ScenarioConfig(duration_s=100 / 12)
    g = GridGeometry()
    gt = generate_motion(c)
    assert len(gt) == 100 and np.hypot(*gt[0].tau[:2]) == pytest.approx(3.0, abs=0.01)
    counts = np.array([len(cfar_detect(render_frame(g, p, c, i))) for i, p in enumerate(gt)])
    inside = np.mean((counts >= 400) & (counts <= 600))
    print(f"points per frame: min {counts.min()} median {np.median(counts):.0f} max {counts.max()}; "
          f"in band {inside:.0%}")
    assert inside >= 0.95


K = CameraIntrinsics(1000.0, 1000.0, 960.0, 540.0, 1920, 1080)


def _pnp_scene(rng, n, sigma):
    ext = RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.normal(0, 0.3, 3))
    # pixels spread over the image, depths around a 3 m standoff
    uv = np.column_stack([rng.uniform(100, 1820, n), rng.uniform(100, 980, n)])
    z = 3.0 + rng.uniform(-0.5, 0.5, n)
    cam = np.column_stack([(uv[:, 0] - K.cx) * z / K.fx, (uv[:, 1] - K.cy) * z / K.fy, z])
    world = (cam - ext.translation) @ ext.rotation
    pix = uv + rng.normal(0, sigma, uv.shape) if sigma else uv
    return ext, [Correspondence(tuple(w), tuple(p)) for w, p in zip(world, pix)]


def test_ac04_pnp_recovery():
    rng = np.random.default_rng(404)
    worst_r = worst_t = 0.0
    for _ in range(1000):
        ext, corr = _pnp_scene(rng, 6, 0.0)
        est = solve_pnp(K, corr).extrinsics
        worst_r = max(worst_r, geodesic_angle(est.rotation, ext.rotation))
        worst_t = max(worst_t, float(np.linalg.norm(est.translation - ext.translation)))
    assert worst_r < 1e-6 and worst_t < 1e-6
    errs = []
    for _ in range(100):
        ext, corr = _pnp_scene(rng, 20, 0.5)
        est = solve_pnp(K, corr).extrinsics
        errs.append(float(np.linalg.norm(est.translation - ext.translation)))
    print(f"noiseless worst {worst_r:.2e} rad / {worst_t:.2e} m; noisy median {np.median(errs) * 1000:.2f} mm")
    assert np.median(errs) < 0.02


def test_ac05_transform_chain():
    rng = np.random.default_rng(505)
    for _ in range(1000):
        a = RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.normal(0, 3, 3))
        b = RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.normal(0, 3, 3))
        p = rng.normal(0, 3, 3)
        oracle = np.linalg.inv(b.matrix()) @ a.matrix() @ np.append(p, 1.0)
        assert np.max(np.abs(chain_vicon_to_radar(a, b, p) - oracle[:3])) <= 1e-12 * max(1.0, np.abs(oracle).max())


def test_ac06_sync():
    rng = np.random.default_rng(606)
    for _ in range(100):
        hold = int(rng.integers(1, 300))
        steps = int(rng.integers(4, 40))
        if steps % 3 == 0:
            steps += 1
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        base = rng.uniform(-1, 1, 3) + [0, 0, 1.7]
        disp = np.concatenate([np.zeros(hold), 0.15 * np.arange(steps + 1) / steps, np.full(30, 0.15)])
        track = MarkerTrack.from_positions(base + disp[:, None] * direction)
        # first ramp step i with 0.15 * i / steps > 0.10
        expected = hold + math.floor(Fraction(2 * steps, 3)) + 1
        assert detect_trigger(track, 0.10) == expected
    for _ in range(1000):
        start = int(rng.integers(0, 10_000))
        n = int(rng.integers(1, 40))
        idx, _ = align_frames(100.0, 12.0, start, n)
        # 100/12 = 25/3: nearest index with halves rounded up
        oracle = [(6 * start + 50 * j + 3) // 6 for j in range(n)]
        assert list(idx) == oracle


def _rand_params(rng):
    return BodyParams(alpha=rng.normal(size=3), beta=rng.normal(0, 0.5, 10), tau=rng.normal(size=3),
                      theta=rng.normal(0, 0.6, (22, 3)), g=rng.uniform(0.05, 0.95))


def _rel_ok(analytic, fd, tol=1e-4):
    err = np.linalg.norm(analytic - fd)
    return err <= tol * max(np.linalg.norm(fd), 1e-8)


def test_ac07_loss_gradients():
    rng = np.random.default_rng(707)
    w = LossWeights()
    assert (w.lambda_alpha, w.lambda_beta, w.lambda_tau, w.lambda_theta, w.lambda_g) == (1, 0.3, 10, 15, 0.5)
    h = 1e-6
    eye = np.eye(83)
    for _ in range(200):
        pred, gt = _rand_params(rng), _rand_params(rng)
        v = pred.to_vector()
        gv = np.tile(gt.to_vector(), (166, 1))
        vals = mesh_loss_batch(np.concatenate([v + h * eye, v - h * eye]), gv, w)[0]
        fd = (vals[:83] - vals[83:]) / (2 * h)
        _, grad, _ = mesh_loss(pred, gt, w)
        assert _rel_ok(grad, fd)

        xy = gt.tau[:2] + rng.normal(0, 0.3, 2)
        _, gxy = bev_loss(xy, gt.tau)
        fd_xy = np.array([(bev_loss(xy + h * e, gt.tau)[0] - bev_loss(xy - h * e, gt.tau)[0]) / (2 * h)
                          for e in np.eye(2)])
        assert _rel_ok(gxy, fd_xy)

        _, gp, gxy_total = total_loss(pred, xy, gt, w)
        fd_p = np.array([
            (total_loss(BodyParams.from_vector(v + h * e), xy, gt, w)[0]
             - total_loss(BodyParams.from_vector(v - h * e), xy, gt, w)[0]) / (2 * h)
            for e in eye
        ])
        fd_q = np.array([
            (total_loss(pred, xy + h * e, gt, w)[0] - total_loss(pred, xy - h * e, gt, w)[0]) / (2 * h)
            for e in np.eye(2)
        ])
        assert _rel_ok(gp, fd_p)
        assert _rel_ok(gxy_total, fd_q)


def test_ac08_metric_kernels():
    rng = np.random.default_rng(808)
    for _ in range(50):
        a, b = rng.normal(size=(2, 884, 3))
        oracle = sum(math.sqrt(sum((x - y) ** 2 for x, y in zip(p, q))) for p, q in zip(a, b)) / len(a) * 1000
        assert abs(mve(a, b) - oracle) <= 1e-9
        ja, jb = a[:22], b[:22]
        oracle = sum(math.sqrt(sum((x - y) ** 2 for x, y in zip(p, q))) for p, q in zip(ja, jb)) / 22 * 1000
        assert abs(mje(ja, jb) - oracle) <= 1e-9
        ta, tb = a[0], b[0]
        assert abs(te(ta, tb) - math.sqrt(sum((x - y) ** 2 for x, y in zip(ta, tb))) * 1000) <= 1e-9

        p, q = _rand_params(rng), _rand_params(rng)
        base = mre(p, q)
        moved = p.copy(tau=rng.normal(0, 100, 3))
        assert mre(moved, q) == base
        assert mre(p, q.copy(tau=rng.normal(0, 100, 3))) == base

    # dyadic fixtures make the offsets exact in floating point
    verts = rng.integers(-8, 8, (884, 3)).astype(np.float64)
    for off, norm_mm in (((0.375, 0.5, 0.0), 625.0), ((3.0, 4.0, 0.0), 5000.0), ((0.0, 0.0, -0.25), 250.0)):
        assert mve(verts + off, verts) == norm_mm
        assert mje(verts[:22] + off, verts[:22]) == norm_mm
        assert te(np.asarray(off) + verts[0], verts[0]) == norm_mm


def _check_partition(cat, sp):
    parts = (sp.train, sp.val, sp.test)
    assert sum(len(p) for p in parts) == len(cat)
    assert set(sp.train) | set(sp.val) | set(sp.test) == set(cat)
    clips = [{(k.subject, k.action) for k in p} for p in parts]
    assert not (clips[0] & clips[1] or clips[0] & clips[2] or clips[1] & clips[2])


def test_ac09_split_integrity(tmp_path):
    cat = [SampleKey(s, a, f) for s in range(1, 21) for a in range(50) for f in range(4)]
    for seed in range(5):
        s1 = make_split(cat, SplitSpec("s1", seed=seed))
        s2 = make_split(cat, SplitSpec("s2", seed=seed))
        s3 = make_split(cat, SplitSpec("s3", seed=seed))
        for sp in (s1, s2, s3):
            d = tmp_path / f"{seed}"
            d.mkdir(exist_ok=True)
            for name, part in sp.parts().items():
                write_manifest(d / f"{name}.txt", part)
                assert read_manifest(d / f"{name}.txt") == part
            _check_partition(cat, sp)
        n = len(cat)
        assert (len(s1.train), len(s1.val), len(s1.test)) == (round(0.75 * n), round(0.05 * n), round(0.20 * n))
        held = {k.subject for k in s2.test}
        assert len(held) == 4
        assert not held & {k.subject for k in s2.train + s2.val}
        test_actions = {k.action for k in s3.test}
        assert not test_actions & {k.action for k in s3.train + s3.val}
        for group, size in (("P1", 30), ("P2", 5), ("P3", 15)):
            assert len(test_actions & PROTOCOL_ACTIONS[group]) == round(0.2 * size)


def _positions(rng, n, r_lo, r_hi):
    # keep the whole body (about +-0.82 m in x, -0.21/+0.12 m in y) inside the default grid
    x_max, y_lo, y_hi = 2.18, 0.46, 5.63
    out = []
    for r in np.linspace(r_lo, r_hi, n):
        lo, hi = max(y_lo, math.sqrt(max(r * r - x_max * x_max, 0.0))), min(y_hi, r)
        y = rng.uniform(lo, hi)
        x = math.copysign(math.sqrt(max(r * r - y * y, 0.0)), rng.uniform(-1, 1))
        out.append((x, y))
    return out


def test_ac10_localization():
    rng = np.random.default_rng(1010)
    g = GridGeometry()
    clean = []
    for n, (x, y) in enumerate(_positions(rng, 50, 0.5, 6.0)):
        c = ScenarioConfig(position=(x, y), amplitude=0.0, noise_floor=0.0, seed=n,
                           facing=float(rng.uniform(-0.3, 0.3)))
        gt = generate_motion(c)[0]
        f = render_frame(g, gt, c, 0)
        loc = localize_bev(FrameStack((f,) * 4))
        clean.append(math.hypot(loc.xy[0] - gt.tau[0], loc.xy[1] - gt.tau[1]))
    noisy = []
    for n, (x, y) in enumerate(_positions(rng, 50, 2.0, 4.0)):
        c = ScenarioConfig(position=(x, y), seed=1000 + n)
        gt = generate_motion(c)[:4]
        loc = localize_bev(FrameStack(tuple(render_frame(g, p, c, i) for i, p in enumerate(gt))))
        noisy.append(math.hypot(loc.xy[0] - gt[-1].tau[0], loc.xy[1] - gt[-1].tau[1]))
    print(f"noise-free max {max(clean):.4f} m; noisy max {max(noisy):.4f} m")
    assert max(clean) <= PITCH
    assert max(noisy) <= 3 * PITCH


def test_ac11_overfit_sanity():
    g = GridGeometry()
    c = ScenarioConfig(position=(0.3, 2.7), seed=11)
    gt = generate_motion(c)[:4]
    stack = FrameStack(tuple(render_frame(g, p, c, i) for i, p in enumerate(gt)))
    model = fit_regressor([(stack, gt[-1])], steps=2000)
    ratio = model.loss_trace[-1] / model.loss_trace[0]
    assert ratio < 0.01

    rng = np.random.default_rng(1111)
    data = []
    for s in range(10):
        c = ScenarioConfig(seed=s, subject=s + 1, position=(rng.uniform(-1.5, 1.5), rng.uniform(2.0, 4.0)),
                           duration_s=20 / 12, amplitude=0.3, period_s=4.0,
                           beta=tuple(rng.normal(0, 0.5, 10)), g=float(s % 2))
        seq = generate_sequence(c, g)
        data += [(stack_window(seq.frames, i), seq.gt[i]) for i in range(len(seq.frames))]
    assert len(data) == 200
    train, test = data[:150], data[150:]
    learned = fit_regressor(train)

    def mean_te(m):
        return float(np.mean([te(predict(s, m).tau, p.tau) for s, p in test]))

    ours, baseline = mean_te(learned), mean_te(LinearRegressor.zeros())
    print(f"single-sample loss ratio {ratio:.4g}; held-out TE {ours:.1f} mm vs baseline {baseline:.1f} mm")
    assert ours < baseline


def test_ac12_store(tmp_path):
    rng = np.random.default_rng(1212)
    keys = [SampleKey(s, a, f) for s in range(1, 11) for a in range(20) for f in range(50)]
    assert len(keys) == 10_000
    blobs = {k: rng.bytes(int(rng.integers(200, 3000))) for k in keys}
    order = list(keys)
    rng.shuffle(order)
    path = tmp_path / "big.m4db"
    store.build(path, ((k, blobs[k]) for k in order), "rt")
    with store.Store(path) as s:
        assert s.keys() == keys
        assert all(s.get(k) == blobs[k] for k in keys)

    tree = store.write_baseline_tree(tmp_path / "files", blobs.items())
    r = store.bench_access(path, tree, n=10_000, seed=1)
    for name, st in r.rows():
        print(f"{name}: {st.lookups_per_s:.0f} lookups/s")
    assert r.store_cold.lookups_per_s >= r.files_cold.lookups_per_s
    assert r.store_warm.lookups_per_s >= r.files_warm.lookups_per_s

    good = path.read_bytes()
    count, _, _, index_off = struct.unpack_from("<QQQQ", good, 24)
    index_len = count * INDEX_DTYPE.itemsize

    def never_wrong(raw):
        bad = tmp_path / "bad.m4db"
        bad.write_bytes(raw)
        try:
            with store.Store(bad) as s:
                for k in s.keys():
                    if s.get(k) != blobs.get(k):
                        return False
        except StoreCorruptError:
            return True
        return False  # corruption went unnoticed

    # random byte flips in the index and footer
    for _ in range(300):
        raw = bytearray(good)
        pos = int(rng.integers(index_off, len(good)))
        raw[pos] ^= int(rng.integers(1, 256))
        assert never_wrong(bytes(raw))

    # consistent tampering: rewrite one entry, then re-seal the index checksum
    original = np.frombuffer(good, INDEX_DTYPE, count, index_off)
    clip_ends = np.flatnonzero([SampleKey.unpack(int(k)).frame == 49 for k in original["key"][:-1]])
    for trial in range(40):
        index = original.copy()
        i = int(rng.choice(clip_ends))
        kind = trial % 4
        if kind == 0:
            index["key"][i] += 1  # a key that was never stored, still in order
        elif kind == 1:
            index["offset"][i] += 1
            index["length"][i] -= 1
        elif kind == 2:
            index["length"][i] -= int(rng.integers(1, 100))
        else:
            index["crc"][i], index["crc"][i + 1] = original["crc"][i + 1], original["crc"][i]
        body = index.tobytes()
        raw = good[:index_off] + body + struct.pack("<I", zlib.crc32(body)) + good[index_off + index_len + 4:]
        assert len(raw) == len(good)
        assert never_wrong(raw)


def test_ac13_pipeline_smoke(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "sim.toml"
    cfg.write_text("[defaults]\nduration_s = 1.0\nseed = 13\n\n[sweep]\nsubjects = [1, 2, 3, 4]\nactions = [0, 5, 12]\n")
    assert run(["simulate", "--config", str(cfg), "--out", str(tmp_path / "raw"), "--format", "raw"]) == 0
    assert run(["pack", "--raw", str(tmp_path / "raw"), "--out", str(tmp_path / "ds")]) == 0
    assert run(["cfar", "--store", str(tmp_path / "ds")]) == 0
    with store.Store(tmp_path / "ds" / "pc.m4db") as s:
        assert len(s) == 12 * 12
    out = tmp_path / "table.csv"
    assert run(["eval", "--store", str(tmp_path / "ds"), "--protocol", "p1", "--split", "s1", "--out", str(out)]) == 0
    elapsed = time.perf_counter() - t0
    header, row = out.read_text().splitlines()
    fields = dict(zip(header.split(","), row.split(",")))
    assert fields["protocol"] == "P1" and fields["split"] == "S1" and fields["status"] == "ok"
    assert int(fields["count"]) > 0
    assert all(math.isfinite(float(fields[m])) for m in ("MVE", "MJE", "MRE", "TE"))
    print(f"pipeline took {elapsed:.1f} s: {json.dumps(fields)}")
    assert elapsed < 300
