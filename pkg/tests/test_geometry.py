"""Camera model, epipolar projection, pose normalization, backprojection."""

import numpy as np
import pytest

from ramdepth.diffcore import Tensor, Tape, backward
from ramdepth import geometry
from ramdepth.geometry import (GeometryError, Intrinsics, Pose, View,
                               backproject, load_cameras, normalize_poses,
                               project, project_map, save_cameras)

IDENT = Pose(np.eye(3), np.zeros(3))


def _rand_pose(rng, t_scale=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-0.5, 0.5)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    r = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    return Pose(r, rng.normal(size=3) * t_scale)


def test_project_identity_exact():
    k = Intrinsics(123.0, 140.0, 31.5, 24.5)
    for depth in (0.5, 2.0, 100.0):
        u, v, z = project((10.25, 7.5), depth, (k, IDENT), (k, IDENT))
        assert abs(u - 10.25) < 1e-9 and abs(v - 7.5) < 1e-9
        assert abs(z - depth) < 1e-9


def test_project_worked_stereo_example():
    k = Intrinsics(100.0, 100.0, 50.0, 50.0)
    src = Pose(np.eye(3), np.array([-0.5, 0.0, 0.0]))
    u, v, _ = project((50.0, 50.0), 2.0, (k, IDENT), (k, src))
    assert abs(u - 25.0) < 1e-6 and abs(v - 50.0) < 1e-6


def test_project_depth_sweep_is_collinear():
    k = Intrinsics(100.0, 100.0, 50.0, 50.0)
    src = Pose(np.eye(3), np.array([-0.5, 0.0, 0.0]))
    pts = [project((50.0, 50.0), d, (k, IDENT), (k, src))[:2] for d in (1.0, 2.0, 4.0)]
    np.testing.assert_allclose(pts, [(0.0, 50.0), (25.0, 50.0), (37.5, 50.0)], atol=1e-9)


def test_epipolar_collinearity_random_pairs():
    rng = np.random.default_rng(0)
    k = Intrinsics(80.0, 80.0, 40.0, 30.0)
    worst = 0.0
    for _ in range(1000):
        ref = _rand_pose(rng, 0.5)
        src = _rand_pose(rng, 0.5)
        q0 = rng.uniform(10, 70, size=2)
        depths = np.sort(rng.uniform(1.0, 20.0, size=3))
        pts = []
        for d in depths:
            u, v, z = project(q0, float(d), (k, ref), (k, src))
            if z <= geometry.BEHIND_CAMERA_Z:
                break
            pts.append((u, v))
        if len(pts) < 3:
            continue
        (x1, y1), (x2, y2), (x3, y3) = pts
        area = 0.5 * abs((x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1))
        worst = max(worst, area)
    assert worst < 1e-5


def test_project_scale_equivariance():
    rng = np.random.default_rng(1)
    k = Intrinsics(90.0, 85.0, 48.0, 31.0)
    for s in (0.1, 10.0):
        for _ in range(50):
            ref = _rand_pose(rng, 0.3)
            src = _rand_pose(rng, 0.3)
            d = rng.uniform(2.0, 10.0)
            q0 = rng.uniform(5, 90, size=2)
            u1, v1, z1 = project(q0, d, (k, ref), (k, src))
            u2, v2, z2 = project(q0, d * s, (k, ref.scaled(s)), (k, src.scaled(s)))
            if z1 <= geometry.BEHIND_CAMERA_Z:
                continue
            assert abs(u1 - u2) < 1e-5 and abs(v1 - v2) < 1e-5


def test_project_rejects_nonpositive_depth():
    k = Intrinsics(10, 10, 5, 5)
    with pytest.raises(GeometryError):
        project((1, 1), 0.0, (k, IDENT), (k, IDENT))


def test_behind_camera_flagged():
    k = Intrinsics(100.0, 100.0, 50.0, 50.0)
    src = Pose(np.eye(3), np.array([0.0, 0.0, -5.0]))  # source 5 units forward
    u, v, z = project((50.0, 50.0), 2.0, (k, IDENT), (k, src))
    assert z <= geometry.BEHIND_CAMERA_Z
    assert u == geometry.INVALID_COORD


# ---------------------------------------------------------------------------
# dense projection

def test_project_map_identity_is_pixel_grid():
    k = Intrinsics(100.0, 100.0, 47.5, 31.5)
    depth = Tensor(np.full((1, 6, 8), 3.0, np.float32))
    coords, valid = project_map(depth, (k, IDENT), (k, IDENT), scale=8.0)
    vv, uu = np.meshgrid(np.arange(6.0), np.arange(8.0), indexing="ij")
    np.testing.assert_allclose(coords.data[0], uu, atol=1e-5)
    np.testing.assert_allclose(coords.data[1], vv, atol=1e-5)
    assert valid.all()


def test_project_map_constant_disparity():
    # frontal plane + pure x-translation: u_src = u_ref - f * tx / d
    k = Intrinsics(64.0, 64.0, 31.5, 23.5)
    tx, d = 0.4, 2.5
    src = Pose(np.eye(3), np.array([-tx, 0.0, 0.0]))
    depth = Tensor(np.full((1, 6, 8), d, np.float32))
    coords, valid = project_map(depth, (k, IDENT), (k, src), scale=8.0)
    kc = k.rescale(8.0)
    vv, uu = np.meshgrid(np.arange(6.0), np.arange(8.0), indexing="ij")
    np.testing.assert_allclose(coords.data[0], uu - kc.fx * tx / d, atol=1e-5)
    np.testing.assert_allclose(coords.data[1], vv, atol=1e-5)


def test_project_map_behind_camera_marked_invalid():
    k = Intrinsics(100.0, 100.0, 50.0, 50.0)
    src = Pose(np.eye(3), np.array([0.0, 0.0, -5.0]))
    depth = Tensor(np.full((1, 4, 4), 2.0, np.float32))
    coords, valid = project_map(depth, (k, IDENT), (k, src), scale=1.0)
    assert not valid.any()
    assert (coords.data == geometry.INVALID_COORD).all()


def test_project_map_depth_gradient_matches_fd():
    rng = np.random.default_rng(2)
    k = Intrinsics(50.0, 55.0, 15.5, 11.5)
    src = _rand_pose(rng, 0.3)
    d0 = rng.uniform(2.0, 5.0, size=(1, 3, 4))
    proj = rng.normal(size=(2, 3, 4))

    from ramdepth.diffcore import ops
    with Tape() as tape:
        depth = Tensor(d0, requires_grad=True)
        coords, _ = project_map(depth, (k, IDENT), (k, src), scale=1.0)
        loss = ops.sum_all(ops.mul(coords, Tensor(proj)))
    backward(loss, tape)
    eps = 1e-4
    num = np.zeros_like(d0)
    for idx in np.ndindex(d0.shape):
        for sgn in (1, -1):
            dd = d0.copy()
            dd[idx] += sgn * eps
            c, _ = project_map(Tensor(dd), (k, IDENT), (k, src), scale=1.0)
            num[idx] += sgn * float((c.data * proj).sum()) / (2 * eps)
    np.testing.assert_allclose(depth.grad, num, rtol=1e-3, atol=1e-6)


# ---------------------------------------------------------------------------
# pose normalization

def _view(pose, wh=(16, 8), vid="v"):
    img = Tensor(np.zeros((3, wh[1], wh[0]), np.float32))
    return View(img, Intrinsics(10, 10, wh[0] / 2, wh[1] / 2), pose, vid)


def test_normalize_poses_two_sources():
    ref = _view(IDENT, vid="ref")
    s1 = _view(Pose(np.eye(3), np.array([1.0, 0, 0])), vid="a")
    s2 = _view(Pose(np.eye(3), np.array([0, 3.0, 0])), vid="b")
    out, scale = normalize_poses([ref, s1, s2])
    assert scale == pytest.approx(2.0)
    norms = [np.linalg.norm(geometry.relative_transform(out[0].pose, v.pose)[1])
             for v in out[1:]]
    assert norms == pytest.approx([0.5, 1.5])


def test_normalize_poses_identity_when_already_unit_mean():
    ref = _view(IDENT)
    s1 = _view(Pose(np.eye(3), np.array([0.0, 0, 1.0])))
    out, scale = normalize_poses([ref, s1])
    assert scale == pytest.approx(1.0)
    np.testing.assert_allclose(out[1].pose.translation, s1.pose.translation)


def test_normalize_poses_random_mean_is_one():
    rng = np.random.default_rng(3)
    for _ in range(20):
        views = [_view(_rand_pose(rng, rng.uniform(0.1, 5.0))) for _ in range(4)]
        out, scale = normalize_poses(views)
        norms = [np.linalg.norm(geometry.relative_transform(out[0].pose, v.pose)[1])
                 for v in out[1:]]
        assert np.mean(norms) == pytest.approx(1.0, abs=1e-6)


def test_normalize_poses_degenerate_baseline():
    with pytest.raises(GeometryError):
        normalize_poses([_view(IDENT), _view(IDENT)])
    with pytest.raises(GeometryError):
        normalize_poses([_view(IDENT)])


# ---------------------------------------------------------------------------
# backprojection

def test_backproject_unit_camera():
    img = Tensor(np.zeros((3, 1, 1), np.float32))
    view = View(img, Intrinsics(1.0, 1.0, 0.0, 0.0), IDENT, "v")
    pts, colors = backproject(np.array([[[5.0]]], np.float32), view)
    np.testing.assert_allclose(pts, [[0.0, 0.0, 5.0]])


def test_backproject_constant_plane_has_constant_z():
    img = Tensor(np.zeros((3, 4, 6), np.float32))
    view = View(img, Intrinsics(10.0, 10.0, 2.5, 1.5), IDENT, "v")
    pts, _ = backproject(np.full((4, 6), 3.0, np.float32), view)
    np.testing.assert_allclose(pts[:, 2], 3.0)


def test_backproject_project_roundtrip():
    rng = np.random.default_rng(4)
    k = Intrinsics(40.0, 44.0, 15.5, 11.5)
    pose = _rand_pose(rng, 0.5)
    h, w = 8, 12
    depth = rng.uniform(1.0, 9.0, size=(h, w)).astype(np.float32)
    img = Tensor(np.zeros((3, h, w), np.float32))
    view = View(img, k, pose, "v")
    pts, _ = backproject(depth, view)
    # reproject each world point into the same camera
    cam = (pts @ pose.rotation.T) + pose.translation
    u = k.fx * cam[:, 0] / cam[:, 2] + k.cx
    v = k.fy * cam[:, 1] / cam[:, 2] + k.cy
    vv, uu = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    assert np.abs(u - uu.reshape(-1)).max() < 1e-4
    assert np.abs(v - vv.reshape(-1)).max() < 1e-4


def test_backproject_skips_nonpositive_depth():
    img = Tensor(np.zeros((3, 2, 2), np.float32))
    view = View(img, Intrinsics(1, 1, 0.5, 0.5), IDENT, "v")
    d = np.array([[1.0, 0.0], [-1.0, 2.0]], np.float32)
    pts, colors = backproject(d, view)
    assert len(pts) == 2 and len(colors) == 2


# ---------------------------------------------------------------------------
# intrinsics / camera file format

def test_intrinsics_rescale_preserves_pixel_centers():
    k = Intrinsics(80.0, 80.0, 47.5, 31.5)
    kc = k.rescale(8.0)
    assert kc.fx == pytest.approx(10.0)
    assert kc.cx == pytest.approx((47.5 + 0.5) / 8 - 0.5)


def test_intrinsics_invalid():
    with pytest.raises(GeometryError):
        Intrinsics(0.0, 1.0, 0.0, 0.0)


def test_pose_validation():
    with pytest.raises(GeometryError):
        Pose(np.eye(3) * 2.0, np.zeros(3))


def test_cameras_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    views = [_view(_rand_pose(rng), vid=f"view_{i}") for i in range(3)]
    path = tmp_path / "cameras.txt"
    save_cameras(path, views)
    cams = load_cameras(path)
    assert set(cams) == {"view_0", "view_1", "view_2"}
    for v in views:
        intr, pose = cams[v.id]
        np.testing.assert_allclose(pose.rotation, v.pose.rotation, atol=1e-12)
        np.testing.assert_allclose(pose.translation, v.pose.translation, atol=1e-12)


def test_cameras_bad_field_count(tmp_path):
    path = tmp_path / "cameras.txt"
    path.write_text("v 1 2 3\n")
    with pytest.raises(GeometryError):
        load_cameras(path)
