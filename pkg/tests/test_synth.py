import numpy as np
import pytest

from mrio.metrics import chamfer
from mrio.synth import (Box, GroundTruth, SceneSpec, Sphere, Torus, build_scene, make_rig,
                        perturb_cloud, random_scene, sample_surface)
from mrio.geometry import PointCloud
from mrio.tensor import ContractError


def truth(*shapes):
    return GroundTruth(shapes, PointCloud(np.zeros((0, 3))))


def test_sdf_definitions():
    s = Sphere((0.0, 0.0, 0.0), 0.3)
    assert s.sdf(np.zeros((1, 3)))[0] == -0.3
    a, b = Sphere((0.2, 0.5, 0.5), 0.1), Sphere((0.8, 0.5, 0.5), 0.15)
    x = np.random.default_rng(0).uniform(size=(50, 3))
    assert np.array_equal(truth(a, b).sdf(x), np.minimum(a.sdf(x), b.sdf(x)))
    box = Box((0.5, 0.5, 0.5), (0.1, 0.2, 0.3))
    assert box.sdf(np.array([[0.5, 0.5, 0.5]]))[0] == pytest.approx(-0.1)
    assert box.sdf(np.array([[0.7, 0.5, 0.5]]))[0] == pytest.approx(0.1)
    tor = Torus((0.5, 0.5, 0.5), (0.2, 0.05))
    assert tor.sdf(np.array([[0.7, 0.5, 0.5]]))[0] == pytest.approx(-0.05)


def test_rig_looks_at_target():
    spec = SceneSpec(n_views=5)
    target = np.asarray(spec.look_at)
    for K, pose in make_rig(spec):
        assert np.abs(pose.R.T @ pose.R - np.eye(3)).max() < 1e-10
        assert abs(np.linalg.det(pose.R) - 1) < 1e-10
        c = pose.center
        axis = pose.R[2]
        v = target - c
        assert np.linalg.norm(v - axis * (v @ axis)) < 1e-9


@pytest.mark.parametrize("shape", [Sphere((0.5, 0.5, 0.5), 0.25), Box((0.5, 0.5, 0.5), (0.15, 0.2, 0.12)),
                                   Torus((0.5, 0.5, 0.5), (0.22, 0.09))])
def test_surface_samples(shape):
    pc = sample_surface(truth(shape), 3000, 1)
    assert np.abs(shape.sdf(pc.points)).max() < 1e-6
    assert np.abs(np.linalg.norm(pc.normals, axis=1) - 1).max() < 1e-10
    eps = 1e-5
    outward = shape.sdf(pc.points + eps * pc.normals) > 0
    assert outward.all()


def test_sphere_samples_radial():
    s = Sphere((0.5, 0.5, 0.5), 0.25)
    pc = sample_surface(truth(s), 2000, 3)
    r = pc.points - 0.5
    assert np.abs(np.linalg.norm(r, axis=1) - 0.25).max() < 1e-6
    radial = r / np.linalg.norm(r, axis=1, keepdims=True)
    assert (np.sum(radial * pc.normals, axis=1) > 0.999999).all()


def test_sampling_density():
    gt = truth(Sphere((0.5, 0.5, 0.5), 0.25))
    n = 2000
    a, b = sample_surface(gt, n, 1), sample_surface(gt, n, 2)
    assert not np.array_equal(a.points, b.points)
    assert chamfer(a, b) < 2 / np.sqrt(n)


def test_union_samples_skip_buried_parts():
    gt = truth(Sphere((0.4, 0.5, 0.5), 0.15), Sphere((0.6, 0.5, 0.5), 0.15))
    pc = sample_surface(gt, 1000, 0)
    assert np.abs(gt.sdf(pc.points)).max() < 1e-6


def test_perturb_cloud():
    pc = sample_surface(truth(Sphere((0.5, 0.5, 0.5), 0.25)), 1000, 0)
    same = perturb_cloud(pc, 0.0, 0.0, 1)
    assert np.array_equal(same.points, pc.points)
    kept = len(perturb_cloud(pc, 0.0, 0.5, 1))
    assert abs(kept - 500) < 4 * np.sqrt(250)
    big = sample_surface(truth(Sphere((0.5, 0.5, 0.5), 0.25)), 20000, 0)
    s = 0.01
    moved = perturb_cloud(big, s, 0.0, 2)
    mean = np.linalg.norm(moved.points - big.points, axis=1).mean()
    assert abs(mean - s * np.sqrt(8 / np.pi)) < 0.1 * s * np.sqrt(8 / np.pi)
    with pytest.raises(ContractError):
        perturb_cloud(pc, -1, 0, 0)


def test_build_scene_deterministic_and_consistent():
    spec = random_scene("torus", 3)
    a, b = build_scene(spec, 500), build_scene(spec, 500)
    for va, vb in zip(a.views, b.views):
        assert np.array_equal(va.image, vb.image)
        assert np.array_equal(va.gt_depth, vb.gt_depth, equal_nan=True)
    v = a.views[0]
    from mrio.camera import pixel_rays
    o, dz = pixel_rays(v)
    hit = np.isfinite(v.gt_depth)
    assert 0.05 < hit.mean() < 0.5
    X = o[hit] + dz[hit] * v.gt_depth[hit][:, None]
    assert np.abs(a.truth.sdf(X)).max() < 1e-4
    assert v.image[hit].std() > 0.02
    assert a.hypotheses.d_min < np.nanmin(v.gt_depth) and np.nanmax(v.gt_depth) < a.hypotheses.d_max


def test_spec_contracts():
    with pytest.raises(ContractError):
        SceneSpec(n_views=1)
