import math
from pathlib import Path

import numpy as np
import pytest

from oracles import point_segment_distance
from m4pipe.body import (
    HEAD_TOP,
    N_JOINTS,
    N_PARAMS,
    PARENTS,
    BodyParams,
    LossWeights,
    bev_loss,
    deserialize_params,
    mesh_loss,
    mesh_loss_batch,
    rotation_loss,
    serialize_params,
    total_loss,
)
from m4pipe.errors import CorruptStreamError, InvalidArgumentError
from m4pipe.geometry import axis_angle_to_rot

GOLDEN = Path(__file__).parent / "data" / "rest_pose_vertices.npz"


def random_params(rng, g=None):
    return BodyParams(
        alpha=rng.normal(size=3),
        beta=rng.normal(0, 0.5, 10),
        tau=rng.normal(size=3),
        theta=rng.normal(0, 0.6, (N_JOINTS, 3)),
        g=rng.uniform(0.05, 0.95) if g is None else g,
    )


def test_vector_layout(rng):
    p = random_params(rng)
    v = p.to_vector()
    assert v.shape == (N_PARAMS,) == (83,)
    assert np.array_equal(v[0:3], p.alpha)
    assert np.array_equal(v[13:16], p.tau)
    assert np.array_equal(v[16:82].reshape(22, 3), p.theta)
    assert v[82] == p.g
    assert np.array_equal(BodyParams.from_vector(v).to_vector(), v)


def test_params_validation():
    with pytest.raises(InvalidArgumentError):
        BodyParams(g=1.5)
    with pytest.raises(InvalidArgumentError):
        BodyParams(tau=[np.nan, 0, 0])
    with pytest.raises(InvalidArgumentError):
        BodyParams.from_vector(np.zeros(82))


def test_rest_pose_faces_sensor(body_model):
    j = body_model.forward_joints(BodyParams())
    assert np.array_equal(j[0], np.zeros(3))
    assert j[15, 2] > 0.5  # head above the pelvis
    assert j[10, 2] < -0.8  # feet below
    assert j[16, 0] > 0 > j[17, 0]  # subject's left is +x
    nodes, _ = body_model.forward_nodes(BodyParams())
    assert nodes[25, 1] < nodes[10, 1]  # toes point toward -y, i.e. toward the sensor


def test_translation_and_root_rotation(body_model, rng):
    p = random_params(rng)
    base = body_model.forward_joints(p.copy(tau=np.zeros(3)))
    assert np.allclose(body_model.forward_joints(p), base + p.tau)
    yaw = np.array([0.0, 0.0, 0.7])
    rotated = body_model.forward_joints(p.copy(alpha=yaw, tau=np.zeros(3), theta=np.zeros((22, 3))))
    plain = body_model.forward_joints(p.copy(tau=np.zeros(3), alpha=np.zeros(3), theta=np.zeros((22, 3))))
    assert np.allclose(rotated, plain @ axis_angle_to_rot(yaw).T)


def test_bone_lengths_preserved_under_pose(body_model, rng):
    p = random_params(rng, g=1.0)
    rest = body_model.forward_joints(p.copy(theta=np.zeros((22, 3))))
    posed = body_model.forward_joints(p)
    for j in range(1, N_JOINTS):
        a = np.linalg.norm(rest[j] - rest[PARENTS[j]])
        b = np.linalg.norm(posed[j] - posed[PARENTS[j]])
        assert math.isclose(a, b, rel_tol=1e-12)


def test_stature_shape_direction(body_model):
    tall = body_model.forward_nodes(BodyParams(beta=[1.0] + [0.0] * 9))[0]
    base = body_model.forward_nodes(BodyParams())[0]
    assert tall[HEAD_TOP, 2] - tall[10, 2] > base[HEAD_TOP, 2] - base[10, 2]


def test_gender_templates_differ(body_model):
    m = body_model.forward_joints(BodyParams(g=0.9))
    f = body_model.forward_joints(BodyParams(g=0.1))
    assert not np.allclose(m, f)
    assert body_model.forward_vertices(BodyParams(g=0.0)).shape == (body_model.vertex_count, 3)


def test_vertices_lie_on_capsules(body_model, rng):
    p = random_params(rng)
    verts = body_model.forward_vertices(p)
    start = 0
    for (a, b, r), n in zip(body_model.bone_segments(p), range(1, 27)):
        count = body_model.rings[n] * body_model.around + 2
        for v in verts[start:start + count]:
            assert math.isclose(point_segment_distance(v, a, b), r, rel_tol=1e-9)
        start += count
    assert start == len(verts)


def test_golden_rest_pose(body_model):
    gold = np.load(GOLDEN)
    male = body_model.forward_vertices(BodyParams(g=1.0))
    female = body_model.forward_vertices(BodyParams(g=0.0))
    assert male.shape == gold["male"].shape == (884, 3)
    assert np.allclose(male, gold["male"], atol=1e-12)
    assert np.allclose(female, gold["female"], atol=1e-12)
    assert np.allclose(body_model.forward_joints(BodyParams(g=1.0)), gold["male_joints"], atol=1e-12)
    # the stored file itself must satisfy the capsule geometry
    segs = body_model.bone_segments(BodyParams(g=1.0))
    start = 0
    for (a, b, r), n in zip(segs, range(1, 27)):
        count = body_model.rings[n] * body_model.around + 2
        d = [point_segment_distance(v, a, b) for v in gold["male"][start:start + count]]
        assert np.allclose(d, r, rtol=1e-9)
        start += count


def test_mesh_loss_zero_at_target(rng):
    for g in (0.0, 0.3, 1.0):
        p = random_params(rng, g=g)
        value, grad, terms = mesh_loss(p, p)
        assert value == pytest.approx(0.0, abs=1e-6)
        assert all(v == pytest.approx(0.0, abs=1e-6) for v in terms.values())


def test_loss_terms_and_weights(rng):
    gt = BodyParams()
    pred = gt.copy(theta=np.zeros((22, 3)))
    pred.theta[4] = [math.pi / 2, 0, 0]
    _, _, terms = mesh_loss(pred, gt)
    assert terms["theta"] == pytest.approx((math.pi / 2) / 22)
    pred = gt.copy(tau=np.array([0.1, -0.2, 0.0]))
    value, _, terms = mesh_loss(pred, gt)
    assert terms["tau"] == pytest.approx(0.3)
    assert value == pytest.approx(10 * 0.3)
    w = LossWeights(lambda_tau=1.0)
    assert mesh_loss(pred, gt, w)[0] == pytest.approx(0.3)
    with pytest.raises(InvalidArgumentError):
        LossWeights(lambda_g=-1.0)


def test_rotation_loss_gradient_fd(rng):
    for _ in range(20):
        a, b = rng.normal(size=(2, 3))
        _, grad = rotation_loss(a, b)
        h = 1e-6
        fd = np.array([(rotation_loss(a + h * e, b)[0] - rotation_loss(a - h * e, b)[0]) / (2 * h) for e in np.eye(3)])
        assert np.allclose(grad, fd, rtol=1e-5, atol=1e-7)


def test_mesh_loss_gradient_fd(rng):
    w = LossWeights()
    for _ in range(5):
        gt, pred = random_params(rng), random_params(rng)
        _, grad, _ = mesh_loss(pred, gt, w)
        v = pred.to_vector()
        h = 1e-6
        pert = np.concatenate([v + h * np.eye(83), v - h * np.eye(83)])
        vals = mesh_loss_batch(pert, np.tile(gt.to_vector(), (166, 1)), w)[0]
        fd = (vals[:83] - vals[83:]) / (2 * h)
        assert np.allclose(grad, fd, rtol=1e-4, atol=1e-6)


def test_bev_and_total_loss(rng):
    gt = random_params(rng)
    value, grad = bev_loss([gt.tau[0] + 0.3, gt.tau[1] - 0.1], gt.tau)
    assert value == pytest.approx(0.4)
    assert list(grad) == [1.0, -1.0]
    pred = random_params(rng)
    xy = gt.tau[:2] + 0.05
    total, gp, gxy = total_loss(pred, xy, gt)
    assert total == pytest.approx(bev_loss(xy, gt.tau)[0] + mesh_loss(pred, gt)[0])
    assert np.array_equal(gp, mesh_loss(pred, gt)[1])
    assert np.array_equal(gxy, [1.0, 1.0])


def test_batch_matches_single(rng):
    preds = [random_params(rng) for _ in range(6)]
    gts = [random_params(rng) for _ in range(6)]
    values, grads, _ = mesh_loss_batch([p.to_vector() for p in preds], [g.to_vector() for g in gts])
    for n in range(6):
        v, g, _ = mesh_loss(preds[n], gts[n])
        assert values[n] == pytest.approx(v, rel=1e-12)
        assert np.allclose(grads[n], g)


def test_serialization_round_trip(rng):
    p = random_params(rng)
    blob = serialize_params(p)
    assert blob[:4] == b"M4BP" and len(blob) == 8 + 4 * 83
    back = deserialize_params(blob)
    assert np.array_equal(back.to_vector(), p.to_vector().astype(np.float32).astype(np.float64))
    with pytest.raises(CorruptStreamError):
        deserialize_params(blob[:-1])
    with pytest.raises(CorruptStreamError):
        deserialize_params(b"XXXX" + blob[4:])


def test_canonical_keeps_rotations(rng):
    p = random_params(rng)
    p.theta[3] = [0.0, 0.0, 5.0]
    c = p.canonical()
    assert np.linalg.norm(c.theta[3]) <= math.pi
    assert np.allclose(axis_angle_to_rot(c.theta[3]), axis_angle_to_rot(p.theta[3]))
