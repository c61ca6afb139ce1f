import numpy as np
import pytest

from mrio import tensor as T
from mrio.camera import (CameraIntrinsics, CameraPose, CameraView, DepthHypothesisSet,
                         backproject, project, read_cam, render_depth_from_sdf,
                         warp_feature_map, warp_pixel, write_cam)
from mrio.gradcheck import finite_diff_check
from mrio.tensor import ContractError, DomainError

K = CameraIntrinsics(80.0, 90.0, 31.5, 30.0, 64, 64)


def view(pose=None, K=K, c=1):
    pose = pose or CameraPose(np.eye(3), np.zeros(3))
    return CameraView(K, pose, np.zeros((K.height, K.width, c)))


def test_backproject_principal_ray():
    assert np.allclose(backproject((K.cx, K.cy), 5.0, K), [0, 0, 5])
    assert np.allclose(backproject((K.cx + K.fx, K.cy), 1.0, K), [1, 0, 1])


def test_backproject_rejects_nonpositive_depth():
    with pytest.raises(DomainError):
        backproject((3, 3), 0.0, K)


def test_project_backproject_round_trip():
    rng = np.random.default_rng(0)
    p = rng.uniform(0, 63, (1000, 2))
    d = rng.uniform(0.1, 20, 1000)
    assert np.abs(project(backproject(p, d, K), K) - p).max() < 1e-10


def test_intrinsics_and_pose_contracts():
    with pytest.raises(ContractError):
        CameraIntrinsics(-1, 1, 0, 0, 4, 4)
    with pytest.raises(ContractError):
        CameraIntrinsics(1, 1, 4, 0, 4, 4)
    with pytest.raises(ContractError):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_identity_warp():
    v = view()
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = rng.uniform(0, 63, 2)
        q, ok = warp_pixel(p, rng.uniform(0.5, 10), v, v)
        assert ok and np.array_equal(q, p)


def test_stereo_disparity():
    b = 0.3
    ref = view()
    src = view(CameraPose(np.eye(3), np.array([-b, 0.0, 0.0])))
    for d in (1.0, 2.5, 7.0):
        q, _ = warp_pixel(np.array([40.0, 20.0]), d, ref, src)
        assert abs((40.0 - q[0]) - K.fx * b / d) < 1e-9
        assert abs(q[1] - 20.0) < 1e-12


def test_warp_round_trip_swapping_views():
    rng = np.random.default_rng(2)
    a = CameraPose.look_at(np.array([2.0, 0.3, 0.5]), np.zeros(3))
    b = CameraPose.look_at(np.array([1.5, 1.2, 0.8]), np.zeros(3))
    va, vb = view(a), view(b)
    for _ in range(50):
        p = rng.uniform(10, 50, 2)
        d = rng.uniform(1.5, 2.5)
        X = a.R.T @ (backproject(p, d, K) - a.t)
        q, _ = warp_pixel(p, d, va, vb)
        d_b = (b.R @ X + b.t)[2]
        back, _ = warp_pixel(q, d_b, vb, va)
        assert np.abs(back - p).max() < 1e-9


def test_behind_camera_is_invalid():
    ref = view()
    src = view(CameraPose(np.diag([-1.0, 1.0, -1.0]), np.zeros(3)))
    _, ok = warp_pixel(np.array([30.0, 30.0]), 2.0, ref, src)
    assert not ok


def test_warp_feature_map_identity_and_constant():
    k = CameraIntrinsics(10.0, 10.0, 3.5, 3.5, 8, 8)
    v = view(K=k, c=2)
    rng = np.random.default_rng(3)
    f = rng.normal(size=(8, 8, 2))
    hyp = DepthHypothesisSet(1.0, 4.0, 5)
    out, valid = warp_feature_map(f, hyp, v, v)
    assert out.shape == (5, 8, 8, 2) and valid.all()
    assert np.allclose(out.data, f[None])
    src = view(CameraPose(np.eye(3), np.array([-0.2, 0.1, 0.0])), K=k, c=2)
    out, valid = warp_feature_map(np.full((8, 8, 2), 3.0), hyp, v, src)
    assert np.allclose(out.data[valid], 3.0)
    assert np.all(out.data[~valid] == 0)


def test_warp_feature_map_peak_at_disparity():
    k = CameraIntrinsics(20.0, 20.0, 15.5, 7.5, 32, 16)
    ref = view(K=k)
    b, d = 0.4, 2.0
    src = view(CameraPose(np.eye(3), np.array([-b, 0.0, 0.0])), K=k)
    f = np.zeros((16, 32, 1))
    f[8, 10] = 1.0
    hyp = DepthHypothesisSet(1.0, 4.0, 7, "depth")
    out, _ = warp_feature_map(f, hyp, ref, src)
    di = int(np.argmin(np.abs(hyp.depths(16, 32)[:, 0, 0] - d)))
    x_ref = 10 + k.fx * b / d
    assert out.data[di, 8, int(x_ref), 0] == pytest.approx(1.0)


def test_warp_feature_map_downscaled_features():
    ref = view()
    src = view(CameraPose(np.eye(3), np.array([-0.1, 0.0, 0.0])))
    out, valid = warp_feature_map(np.ones((32, 32, 3)), DepthHypothesisSet(1, 3, 4), ref, src)
    assert out.shape == (4, 32, 32, 3)


def test_warp_feature_map_gradient():
    k = CameraIntrinsics(10.0, 10.0, 3.5, 3.5, 8, 8)
    ref = view(K=k)
    src = view(CameraPose.look_at(np.array([0.3, 0.1, -3.0]), np.array([0.0, 0.0, 1.0]), up=(0, 1, 0)), K=k)
    rng = np.random.default_rng(4)
    f = T.Tensor(rng.normal(size=(8, 8, 2)), requires_grad=True)
    w = rng.normal(size=(4, 8, 8, 2))
    hyp = DepthHypothesisSet(2.0, 6.0, 4)
    err = finite_diff_check(lambda: (warp_feature_map(f, hyp, ref, src)[0] * w).sum(), [f])
    assert err < 1e-4


def test_hypothesis_sets():
    h = DepthHypothesisSet(1.0, 4.0, 4)
    d = h.depths(2, 3)[:, 0, 0]
    assert np.allclose(1 / d, np.linspace(1, 0.25, 4))
    assert np.allclose(DepthHypothesisSet(1.0, 4.0, 4, "depth").depths(1, 1)[:, 0, 0], [1, 2, 3, 4])
    c = np.full((2, 3), np.nan)
    c[0, 1] = 2.0
    n = DepthHypothesisSet(1.0, 4.0, 3, centers=c, rel_halfwidth=0.1).depths(2, 3)
    assert n[0, 0, 1] == pytest.approx(1.8) and n[-1, 0, 1] == pytest.approx(2.2)
    assert n[0, 1, 1] == 1.0
    with pytest.raises(ContractError):
        DepthHypothesisSet(2.0, 1.0)
    with pytest.raises(ContractError):
        DepthHypothesisSet(1.0, 2.0, 1)


def test_sphere_trace_analytic():
    L, r = 3.0, 0.5
    v = view(CameraPose.look_at(np.array([0.0, 0.0, -L]), np.zeros(3), up=(0, 1, 0)),
             K=CameraIntrinsics(20, 20, 8, 8, 17, 17))
    depth = render_depth_from_sdf(lambda x: np.linalg.norm(x, axis=1) - r, v, 10.0)
    assert abs(depth[8, 8] - (L - r)) < 1e-8
    plane = render_depth_from_sdf(lambda x: -x[:, 2], v, 10.0)
    assert abs(plane[8, 8] - L) < 1e-8
    empty = render_depth_from_sdf(lambda x: np.full(len(x), 1.0 + np.linalg.norm(x, axis=1)), v, 10.0)
    assert np.isnan(empty).all()


def test_cam_file_round_trip(tmp_path):
    pose = CameraPose.look_at(np.array([1.0, 2.0, 0.5]), np.zeros(3))
    v = view(pose)
    hyp = DepthHypothesisSet(0.7, 3.1, 32, "depth")
    write_cam(tmp_path / "00000000_cam.txt", v, hyp)
    k2, p2, h2 = read_cam(tmp_path / "00000000_cam.txt", 64, 64, "depth")
    assert k2 == K
    assert np.array_equal(p2.R, pose.R) and np.array_equal(p2.t, pose.t)
    assert h2.count == 32 and h2.d_min == 0.7 and abs(h2.d_max - 3.1) < 1e-12


def test_cam_file_malformed(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("extrinsic\n1 0 0\n")
    with pytest.raises(ValueError):
        read_cam(p, 64, 64)
