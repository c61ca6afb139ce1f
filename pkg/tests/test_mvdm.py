import numpy as np
import pytest

from mrio import mvdm, synth
from mrio import tensor as T
from mrio.camera import CameraIntrinsics, CameraPose, CameraView, DepthHypothesisSet, backproject, warp_feature_map
from mrio.geometry import TriangleMesh
from mrio.gradcheck import finite_diff_check
from mrio.isosurface import extract_mesh
from mrio.metrics import accuracy
from mrio.tensor import ContractError, DomainError, Tensor

NET = mvdm.MatchingNet(seed=0)


def test_zero_image_features_constant_in_interior():
    pyr = mvdm.extract_features(np.zeros((16, 16, 3)), NET)
    assert pyr.fine.shape == (16, 16, 16) and pyr.coarse.shape == (8, 8, 32)
    inner = pyr.coarse.data[1:-1, 1:-1].reshape(-1, 32)
    assert np.all(inner == inner[0])
    fine = pyr.fine.data[1:-1, 1:-1].reshape(-1, 16)
    assert np.all(fine == fine[0])


def test_two_pixel_shift_moves_coarse_features_by_one():
    img = np.random.default_rng(0).uniform(size=(20, 20, 3))
    shifted = np.zeros_like(img)
    shifted[2:, :] = img[:-2, :]
    a = mvdm.extract_features(img, NET).coarse.data
    b = mvdm.extract_features(shifted, NET).coarse.data
    assert np.allclose(b[3:8, 2:8], a[2:7, 2:8], atol=1e-12)


def test_features_reject_odd_extents_and_stay_finite():
    with pytest.raises(ContractError):
        mvdm.extract_features(np.zeros((15, 16, 3)), NET)
    pyr = mvdm.extract_features(np.random.default_rng(1).uniform(size=(12, 8, 3)), NET)
    assert np.all(np.isfinite(pyr.fine.data)) and np.all(np.isfinite(pyr.coarse.data))


def test_positional_encoding():
    pe = mvdm.positional_encoding(8, 8, 16)
    assert np.array_equal(pe[0, 0], np.tile([0.0, 1.0], 8))
    flat = pe.reshape(64, 16)
    d = np.linalg.norm(flat[:, None] - flat[None], axis=2)
    assert np.all(d[~np.eye(64, dtype=bool)] > 1e-6)
    assert np.abs(pe).max() <= 1.0
    with pytest.raises(ContractError):
        mvdm.positional_encoding(4, 4, 5)


def test_attention_single_key():
    rng = np.random.default_rng(0)
    V = rng.normal(size=(1, 4))
    out = mvdm.attention(rng.normal(size=(5, 4)), rng.normal(size=(1, 4)), V).data
    assert np.allclose(out, np.repeat(V, 5, axis=0), atol=1e-15)


def test_attention_saturates_on_matching_key():
    K = np.eye(4)
    V = np.random.default_rng(1).normal(size=(4, 3))
    for i in range(4):
        out = mvdm.attention(K[i:i + 1] * 60.0, K, V).data
        assert np.allclose(out[0], V[i], atol=1e-20 + 1e-12)


def test_attention_identical_keys_average():
    V = np.random.default_rng(2).normal(size=(6, 3))
    out = mvdm.attention(np.ones((2, 4)), np.ones((6, 4)), V).data
    assert np.allclose(out, V.mean(axis=0), atol=1e-14)


def test_attention_scale_flag_and_hull():
    rng = np.random.default_rng(3)
    Q, K, V = rng.normal(size=(7, 9)), rng.normal(size=(5, 9)), rng.normal(size=(5, 2))
    a = mvdm.attention(Q, K, V).data
    b = mvdm.attention(Q * (1 / 3.0), K, V).data
    assert np.allclose(mvdm.attention(Q, K, V, scale=True).data, b, atol=1e-14)
    assert not np.allclose(a, b)
    assert np.all(a >= V.min(axis=0) - 1e-12) and np.all(a <= V.max(axis=0) + 1e-12)


def test_attention_gradient():
    rng = np.random.default_rng(4)
    Q, K, V = (Tensor(rng.normal(size=s), requires_grad=True) for s in ((3, 4), (5, 4), (5, 2)))
    w = rng.normal(size=(3, 2))
    err = finite_diff_check(lambda: (mvdm.attention(Q, K, V) * w).sum(), [Q, K, V])
    assert err < 1e-4


def _identity_net():
    net = mvdm.MatchingNet(seed=1)
    for layer in ("intra", "inter"):
        for k in ("Wq", "Wk", "Wv", "Wo"):
            net.p(layer, k).data = np.eye(32)
    return net


def test_fmt_transform_shapes_and_hull():
    rng = np.random.default_rng(5)
    net = _identity_net()
    ref = mvdm.extract_features(rng.uniform(size=(8, 8, 3)), net)
    src = mvdm.extract_features(rng.uniform(size=(8, 8, 3)), net)
    f_ref, f_src = mvdm.fmt_transform(ref, [src], net)
    assert f_ref.shape == (8, 8, 16) and f_src[0].shape == (8, 8, 16)
    assert np.all(np.isfinite(f_ref.data)) and np.all(np.isfinite(f_src[0].data))
    # with the reference duplicated as source, inter-attention mixes reference tokens only
    r = mvdm.intra_transform(ref, net).data
    mixed = mvdm.attention(r, r, r).data
    assert np.all(mixed >= r.min(axis=0) - 1e-12) and np.all(mixed <= r.max(axis=0) + 1e-12)


def test_fmt_transform_reference_ignores_source_order():
    rng = np.random.default_rng(6)
    pyrs = [mvdm.extract_features(rng.uniform(size=(8, 8, 3)), NET) for _ in range(4)]
    r1, s1 = mvdm.fmt_transform(pyrs[0], pyrs[1:], NET)
    r2, s2 = mvdm.fmt_transform(pyrs[0], pyrs[:0:-1], NET)
    assert np.array_equal(r1.data, r2.data)
    for a, b in zip(s1, s2[::-1]):
        assert np.array_equal(a.data, b.data)
    with pytest.raises(ContractError):
        mvdm.fmt_transform(pyrs[0], [], NET)


def test_correlation_replicated_reference():
    f = np.random.default_rng(7).normal(size=(5, 6, 4))
    vol = mvdm.correlation_volume(f, [np.repeat(f[None], 9, axis=0)]).data
    expect = np.sum(f * f, axis=2)
    assert np.allclose(vol, expect[None], rtol=1e-12)
    zero = mvdm.correlation_volume(np.zeros((5, 6, 4)), [np.zeros((9, 5, 6, 4))]).data
    assert np.all(zero == 0)


def test_correlation_source_order_invariant():
    rng = np.random.default_rng(8)
    f = rng.normal(size=(4, 5, 3))
    w = [rng.normal(size=(6, 4, 5, 3)) for _ in range(4)]
    a = mvdm.correlation_volume(f, w).data
    b = mvdm.correlation_volume(f, w[::-1]).data
    assert np.allclose(a, b, rtol=1e-12, atol=1e-14)


def _plane_pair(depth=2.0, baseline=0.2):
    K = CameraIntrinsics(80.0, 80.0, 31.5, 31.5, 64, 64)
    tex = synth.Texture(3)
    ys, xs = np.mgrid[0:64, 0:64].astype(np.float64)
    p = np.stack([xs, ys], -1)
    X = backproject(p, np.full((64, 64), depth), K)
    c = np.array([baseline, 0.0, 0.0])
    ref = CameraView(K, CameraPose(np.eye(3), np.zeros(3)), tex(X))
    src = CameraView(K, CameraPose(np.eye(3), -c), tex(X + c))
    return ref, src


def _patch_descriptor(img, r=2):
    g = np.pad(img.mean(axis=2), r, mode="edge")
    H, W = img.shape[:2]
    cols = [g[dy:dy + H, dx:dx + W] for dy in range(2 * r + 1) for dx in range(2 * r + 1)]
    f = np.stack(cols, axis=-1)
    f = f - f.mean(axis=-1, keepdims=True)
    return f / np.maximum(np.linalg.norm(f, axis=-1, keepdims=True), 1e-12)


def test_correlation_peaks_at_true_plane():
    ref, src = _plane_pair()
    hyp = DepthHypothesisSet(1.5, 2.5, 21, "depth")
    warped, ok = warp_feature_map(_patch_descriptor(src.image), hyp, ref, src)
    vol = mvdm.correlation_volume(_patch_descriptor(ref.image), [warped]).data
    valid = ok.all(axis=0)
    assert valid.sum() > 1000
    assert np.mean(np.argmax(vol, axis=0)[valid] == 10) >= 0.9


def test_depth_probability_uniform_and_normalised():
    net = mvdm.MatchingNet(seed=2)
    P = mvdm.depth_probability(np.full((7, 5, 6), 0.3), net)
    assert np.allclose(P.prob.data, 1 / 7, atol=1e-15)
    vol = np.random.default_rng(9).normal(size=(7, 5, 6))
    P = mvdm.depth_probability(vol, net)
    assert np.abs(P.prob.data.sum(axis=0) - 1).max() < 1e-10


def test_depth_probability_keeps_peak():
    vol = np.zeros((9, 4, 4))
    vol[3] = 50.0
    P = mvdm.depth_probability(vol, mvdm.MatchingNet(seed=3))
    assert np.all(np.argmax(P.prob.data, axis=0) == 3)


def _prob_volume(rng, D=6, H=3, W=4):
    logits = Tensor(rng.normal(size=(D, H, W)), requires_grad=True)
    depths = np.broadcast_to(np.linspace(1.0, 2.0, D)[:, None, None], (D, H, W)).copy()
    gt = rng.uniform(1.0, 2.0, (H, W))
    return logits, depths, gt


def _pv(logits, depths):
    return mvdm.DepthProbabilityVolume(logits, T.softmax(logits, axis=0), depths,
                                       np.ones(depths.shape[1:], bool))


def test_focal_gamma_zero_is_cross_entropy_bitwise():
    rng = np.random.default_rng(10)
    for _ in range(100):
        logits, depths, gt = _prob_volume(rng)
        P = _pv(logits, depths)
        assert mvdm.focal_loss(P, gt, 0.0).item() == mvdm.cross_entropy(P, gt).item()


def test_focal_values():
    D, H, W = 4, 2, 2
    depths = np.broadcast_to(np.linspace(1.0, 2.0, D)[:, None, None], (D, H, W)).copy()
    gt = np.full((H, W), depths[1, 0, 0])
    big = np.full((D, H, W), -800.0)
    big[1] = 0.0
    assert mvdm.focal_loss(_pv(Tensor(big), depths), gt, 2.0).item() == 0.0
    half = np.full((D, H, W), -800.0)
    half[1] = half[2] = 0.0
    val = mvdm.focal_loss(_pv(Tensor(half), depths), gt, 2.0).item()
    assert val == pytest.approx(0.25 * np.log(2), rel=1e-12)


def test_focal_excludes_out_of_range_and_empty():
    rng = np.random.default_rng(11)
    logits, depths, gt = _prob_volume(rng)
    P = _pv(logits, depths)
    gt2 = gt.copy()
    gt2[0, 0] = 5.0
    gt2[1, 1] = np.nan
    keep = np.ones(gt.shape, bool)
    keep[0, 0] = keep[1, 1] = False
    idx, ok = mvdm.gt_indices(depths, gt2)
    assert np.array_equal(ok, keep)
    manual = -np.mean(np.log(np.take_along_axis(P.prob.data, idx[None], 0)[0][keep]))
    assert mvdm.focal_loss(P, gt2, 0.0).item() == pytest.approx(manual, rel=1e-12)
    with pytest.raises(DomainError):
        mvdm.focal_loss(P, np.full(gt.shape, 9.0), 2.0)
    with pytest.raises(ContractError):
        mvdm.focal_loss(P, gt, -1.0)


@pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0])
def test_focal_gradient(gamma):
    logits, depths, gt = _prob_volume(np.random.default_rng(12))
    err = finite_diff_check(lambda: mvdm.focal_loss(_pv(logits, depths), gt, gamma), [logits])
    assert err < 1e-4


def _scene(seed, kind="sphere"):
    return synth.build_scene(synth.random_scene(kind, seed, n_views=3), surface_samples=4000)


def test_photo_consistency_prefers_true_surface():
    wins = 0
    for seed in range(5):
        sc = _scene(seed, synth.SCENE_KINDS[seed % 3])
        mesh = extract_mesh(lambda x: 0.5 - sc.truth.sdf(x), 16, 64)
        normals = mesh.vertex_normals()
        moved = TriangleMesh(mesh.vertices + normals * (2 / 64), mesh.faces)
        pairs = [(0, 1), (1, 2), (2, 0)]
        a = mvdm.photo_consistency_loss(mesh, sc.views, pairs, 1500, seed).item()
        b = mvdm.photo_consistency_loss(moved, sc.views, pairs, 1500, seed).item()
        wins += a <= b
    assert wins >= 4


def test_photo_consistency_identical_views_and_back_faces():
    sc = _scene(1)
    mesh = extract_mesh(lambda x: 0.5 - sc.truth.sdf(x), 16, 64)
    terms = mvdm.photo_consistency_terms(mesh, sc.views, [(0, 0)], 800, 0)
    ncc, w = terms[0]
    assert np.any(w > 0)
    assert np.allclose(ncc[w > 0], 1.0, atol=1e-9)
    # flipping the orientation makes every sample back-facing
    flipped = TriangleMesh(mesh.vertices, mesh.faces[:, ::-1])
    _, w2 = mvdm.photo_consistency_terms(flipped, sc.views, [(0, 1)], 800, 0)[0]
    assert np.all(w2 == 0)
    assert mvdm.photo_consistency_loss(flipped, sc.views, [(0, 1)], 800, 0).item() == 0.0
    with pytest.raises(DomainError):
        mvdm.photo_consistency_loss(TriangleMesh.empty(), sc.views, [(0, 1)])


def test_fusion_of_true_depths_is_accurate():
    sc = synth.build_scene(synth.random_scene("box", 2))
    cloud = mvdm.fuse_depth_maps([v.gt_depth for v in sc.views], None, sc.views)
    assert len(cloud) > 1000
    assert accuracy(cloud, sc.truth.surface) < 1 / 64
    assert np.allclose(np.linalg.norm(cloud.normals, axis=1), 1.0)


def test_fusion_gates():
    sc = synth.build_scene(synth.random_scene("sphere", 3))
    depths = [v.gt_depth.copy() for v in sc.views]
    r, c = np.argwhere(np.isfinite(depths[0]))[len(np.argwhere(np.isfinite(depths[0]))) // 2]
    depths[0][r, c] *= 1.2
    cfg = mvdm.FusionConfig(clip_unit_cube=False)
    pts, _ = mvdm.fuse_view(0, depths, None, sc.views, cfg)
    o, dz = mvdm.pixel_rays(sc.views[0])
    bad = o[r, c] + dz[r, c] * depths[0][r, c]
    assert np.min(np.linalg.norm(pts - bad, axis=1)) > 1e-6
    probs = [np.full(d.shape, 0.5) for d in depths]
    lax = mvdm.FusionConfig(p_thresh=0.0, min_views=0, px_thresh=np.inf, rel_depth=np.inf,
                            clip_unit_cube=False)
    n_all = sum(np.isfinite(d).sum() for d in depths)
    assert len(mvdm.fuse_depth_maps(depths, probs, sc.views, lax)) == n_all
    strict = mvdm.FusionConfig(p_thresh=np.inf)
    assert len(mvdm.fuse_depth_maps(depths, probs, sc.views, strict)) == 0
    with pytest.raises(ContractError):
        mvdm.fuse_depth_maps(depths[:1], None, sc.views[:1])


def test_patch_std_and_texture_gate():
    rng = np.random.default_rng(12)
    img = rng.uniform(size=(12, 10, 3))
    s = mvdm.patch_std(img)
    g = np.pad(img.mean(axis=2), 2, mode="edge")
    assert s[4, 7] == pytest.approx(g[4:9, 7:12].std(), rel=1e-12)
    assert np.all(mvdm.patch_std(np.full((8, 8), 0.3)) < 1e-15)
    sc = synth.build_scene(synth.random_scene("sphere", 3))
    depths = [np.where(np.isfinite(v.gt_depth), v.gt_depth, 1.5) for v in sc.views]
    lax = dict(p_thresh=0.0, min_views=0, px_thresh=np.inf, rel_depth=np.inf, clip_unit_cube=False)
    n_all = sum(d.size for d in depths)
    assert len(mvdm.fuse_depth_maps(depths, None, sc.views, mvdm.FusionConfig(**lax))) == n_all
    gated = mvdm.fuse_depth_maps(depths, None, sc.views, mvdm.FusionConfig(min_texture=1e-3, **lax))
    # the black background is dropped, shaded pixels survive
    fg = sum(np.isfinite(v.gt_depth).sum() for v in sc.views)
    assert fg <= len(gated) < n_all
    assert len(gated) <= sum((mvdm.patch_std(v.image) > 0).sum() for v in sc.views)


def test_mesh_depth_render_matches_sdf_render():
    sc = synth.build_scene(synth.random_scene("sphere", 4))
    mesh = extract_mesh(lambda x: 0.5 - sc.truth.sdf(x), 16, 64)
    for v in sc.views[:2]:
        d = mvdm.render_mesh_depth(mesh, v)
        both = np.isfinite(d) & np.isfinite(v.gt_depth)
        assert both.sum() > 0.95 * np.isfinite(v.gt_depth).sum()
        assert np.abs(d[both] - v.gt_depth[both]).max() < np.sqrt(3) / 64
    behind = CameraView(v.intrinsics, CameraPose(v.pose.R, v.pose.t - [0.0, 0.0, 10.0]), v.image)
    assert np.all(np.isnan(mvdm.render_mesh_depth(mesh, behind)))
