"""Multi-view dense matching: conv features, attention-based feature
transform, plane-sweep correlation, regularised depth probabilities, focal
supervision, photo-consistency scoring and depth-map fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .camera import (CameraView, DepthHypothesisSet, backproject, pixel_rays, project,
                     warp_feature_map)
from .geometry import PointCloud, TriangleMesh
from .nn import Module, he
from .tensor import ContractError, DomainError, Tensor


class MatchingNet(Module):
    def __init__(self, seed: int = 0, channels: int = 3, fine: int = 16, coarse: int = 32,
                 reg: int = 4):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.fine, self.coarse = fine, coarse
        self.add_layer("conv0", W=he(rng, (3, 3, channels, fine), 9 * channels), b=np.zeros(fine))
        self.add_layer("conv1", W=he(rng, (3, 3, fine, coarse), 9 * fine), b=np.zeros(coarse))
        for name in ("intra", "inter"):
            self.add_layer(name, Wq=he(rng, (coarse, coarse), coarse, 0.5),
                           Wk=he(rng, (coarse, coarse), coarse, 0.5),
                           Wv=he(rng, (coarse, coarse), coarse, 1.0),
                           Wo=he(rng, (coarse, coarse), coarse, 0.25))
        self.add_layer("proj", W=he(rng, (coarse, fine), coarse, 0.25), b=np.zeros(fine))
        self.add_layer("reg1", W=he(rng, (3, 3, 3, 1, reg), 27), b=np.zeros(reg))
        self.add_layer("reg2", W=he(rng, (3, 3, 3, reg, reg), 27 * reg), b=np.zeros(reg),
                       gain=np.array(1.0 / fine))
        # zero output layer: the regulariser starts as the identity map
        self.add_layer("reg3", W=np.zeros((3, 3, 3, reg, 1)), b=np.zeros(1))


@dataclass
class FeaturePyramid:
    fine: Tensor
    coarse: Tensor


@dataclass
class DepthProbabilityVolume:
    logits: Tensor
    prob: Tensor
    depths: np.ndarray   # D x H x W hypothesis depths
    valid: np.ndarray    # H x W, pixel has at least one in-raster source sample

    def log_prob(self) -> Tensor:
        z = self.logits
        m = np.max(z.data, axis=0, keepdims=True)
        shifted = z - m
        return shifted - T.log(T.exp(shifted).sum(axis=0, keepdims=True))


def extract_features(image, net: MatchingNet) -> FeaturePyramid:
    img = T.as_tensor(image)
    if img.ndim != 3 or img.shape[0] % 2 or img.shape[1] % 2:
        raise ContractError(f"image extents must be even, got {img.shape[:2]}")
    x = img - 0.5
    fine = T.relu(T.conv2d(x, net.p("conv0", "W"), net.p("conv0", "b")))
    coarse = T.relu(T.conv2d(fine, net.p("conv1", "W"), net.p("conv1", "b"), stride=2))
    return FeaturePyramid(fine, coarse)


def positional_encoding(H: int, W: int, F: int) -> np.ndarray:
    """2D sinusoidal code.  Channel pairs (sin, cos) alternate between the x
    and y axes with geometrically decreasing frequency."""
    if F % 2:
        raise ContractError("encoding width must be even")
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    out = np.empty((H, W, F))
    for k in range(F // 2):
        pos = xs if k % 2 == 0 else ys
        w = 1.0 / 100.0 ** ((k // 2) / max(F // 4, 1))
        out[..., 2 * k] = np.sin(pos * w)
        out[..., 2 * k + 1] = np.cos(pos * w)
    return out


def attention(Q, K, V, scale: bool = False) -> Tensor:
    """softmax(Q K^T) V, optionally with logits divided by sqrt(F)."""
    Q, K, V = T.as_tensor(Q), T.as_tensor(K), T.as_tensor(V)
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ContractError(f"attention shapes {Q.shape}, {K.shape}, {V.shape}")
    logits = T.matmul(Q, K.T)
    if scale:
        logits = logits * (1.0 / np.sqrt(Q.shape[1]))
    return T.matmul(T.softmax(logits, axis=1), V)


def _attend(net, layer, x, ctx, scale=False) -> Tensor:
    q = T.matmul(x, net.p(layer, "Wq"))
    k = T.matmul(ctx, net.p(layer, "Wk"))
    v = T.matmul(ctx, net.p(layer, "Wv"))
    return T.matmul(attention(q, k, v, scale), net.p(layer, "Wo"))


def _tokens(coarse: Tensor) -> Tensor:
    h, w, c = coarse.shape
    pe = positional_encoding(h, w, c).reshape(h * w, c)
    return T.reshape(coarse, (h * w, c)) + pe


def intra_transform(pyr: FeaturePyramid, net: MatchingNet) -> Tensor:
    x = _tokens(pyr.coarse)
    return x + _attend(net, "intra", x, x)


def _upsample_matrix(h: int, w: int):
    H, W = 2 * h, 2 * w
    idx = np.arange(H * W)
    parent = (idx // W // 2) * w + (idx % W) // 2
    return sp.csr_matrix((np.ones(H * W), (idx, parent)), shape=(H * W, h * w))


def _to_fine(pyr: FeaturePyramid, tokens: Tensor, net: MatchingNet) -> Tensor:
    H, W, F = pyr.fine.shape
    h, w = H // 2, W // 2
    delta = T.matmul(tokens, net.p("proj", "W")) + net.p("proj", "b")
    up = T.linear_map(_upsample_matrix(h, w), delta)
    return pyr.fine + T.reshape(up, (H, W, F))


def fmt_transform(ref: FeaturePyramid, srcs: list, net: MatchingNet,
                  intra: list | None = None) -> tuple[Tensor, list]:
    """Intra-attention on every image, then each source attends to the
    reference.  Returns transformed fine features (reference, [sources]).

    ``intra`` may hold precomputed intra-attention tokens ``[ref, *srcs]``.
    """
    if not srcs:
        raise ContractError("need at least one source view")
    toks = intra or [intra_transform(p, net) for p in [ref] + list(srcs)]
    r = toks[0]
    out_src = []
    for pyr, s in zip(srcs, toks[1:]):
        s2 = s + _attend(net, "inter", s, r)
        out_src.append(_to_fine(pyr, s2, net))
    return _to_fine(ref, r, net), out_src


def correlation_volume(ref_feat, warped: list) -> Tensor:
    """Per-view inner products combined with max-response weights.

    Weights are ``max_d h_i`` clamped at zero and the sum is normalised by the
    total weight (zero where every weight vanishes).
    """
    if not warped:
        raise ContractError("need at least one warped source")
    ref_feat = T.as_tensor(ref_feat)
    num, den = None, None
    for w in warped:
        w = T.as_tensor(w)
        if w.shape[1:] != ref_feat.shape:
            raise ContractError(f"warped {w.shape} vs reference {ref_feat.shape}")
        h = (w * T.reshape(ref_feat, (1,) + ref_feat.shape)).sum(axis=3)
        wt = T.relu(T.tmax(h, axis=0))
        term = h * T.reshape(wt, (1,) + wt.shape)
        num = term if num is None else num + term
        den = wt if den is None else den + wt
    safe = T.where(den.data > 0, den, 1.0)
    return num / T.reshape(safe, (1,) + safe.shape)


def regularize(volume, net: MatchingNet) -> Tensor:
    """Residual 3-layer 3x3x3 conv stack over (d, h, w); returns logits."""
    v = T.as_tensor(volume)
    D, H, W = v.shape
    x = T.reshape(v, (D, H, W, 1)) * net.p("reg2", "gain")
    h = T.relu(T.conv3d(x, net.p("reg1", "W"), net.p("reg1", "b")))
    h = T.relu(T.conv3d(h, net.p("reg2", "W"), net.p("reg2", "b")))
    r = T.conv3d(h, net.p("reg3", "W"), net.p("reg3", "b"))
    return T.reshape(x + r, (D, H, W))


def depth_probability(volume, net: MatchingNet, depths: np.ndarray | None = None,
                      valid: np.ndarray | None = None) -> DepthProbabilityVolume:
    logits = regularize(volume, net)
    prob = T.softmax(logits, axis=0)
    D, H, W = logits.shape
    return DepthProbabilityVolume(logits, prob,
                                  depths if depths is not None else np.zeros((D, H, W)),
                                  valid if valid is not None else np.ones((H, W), dtype=bool))


def gt_indices(depths: np.ndarray, gt_depth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hypothesis per pixel and the mask of pixels inside the swept range."""
    gt = np.asarray(gt_depth, dtype=np.float64)
    lo = np.minimum(depths[0], depths[-1])
    hi = np.maximum(depths[0], depths[-1])
    ok = np.isfinite(gt) & (gt >= lo) & (gt <= hi)
    g = np.where(ok, gt, 0.0)
    idx = np.argmin(np.abs(depths - g[None]), axis=0)
    return idx, ok


def focal_loss(P: DepthProbabilityVolume, gt_depth: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Mean over valid pixels of -(1 - P_gt)^gamma log P_gt."""
    if gamma < 0:
        raise ContractError("gamma must be non-negative")
    idx, ok = gt_indices(P.depths, gt_depth)
    ok = ok & P.valid
    if not ok.any():
        raise DomainError("no valid pixels for the focal loss")
    logp = T.gather(P.log_prob(), idx, axis=0)[ok]
    if gamma == 0:
        return T.mean(-logp)
    mod = T.power(1.0 - T.exp(logp), gamma)
    return T.mean(-(mod * logp))


def cross_entropy(P: DepthProbabilityVolume, gt_depth: np.ndarray) -> Tensor:
    idx, ok = gt_indices(P.depths, gt_depth)
    ok = ok & P.valid
    if not ok.any():
        raise DomainError("no valid pixels for the cross-entropy")
    return T.mean(-T.gather(P.log_prob(), idx, axis=0)[ok])


def depth_estimate(P: DepthProbabilityVolume, window: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel depth and confidence.

    Depth is the probability-weighted mean of inverse depth over
    ``argmax +/- window`` hypotheses; confidence is the probability mass there.
    """
    prob = P.prob.data
    D = prob.shape[0]
    am = np.argmax(prob, axis=0)
    acc_w = np.zeros(am.shape)
    acc_inv = np.zeros(am.shape)
    for o in range(-window, window + 1):
        k = am + o
        inside = (k >= 0) & (k < D)
        kc = np.clip(k, 0, D - 1)
        w = np.take_along_axis(prob, kc[None], 0)[0] * inside
        d = np.take_along_axis(P.depths, kc[None], 0)[0]
        acc_w += w
        acc_inv += w / d
    depth = acc_w / acc_inv
    conf = acc_w
    depth = np.where(P.valid, depth, np.nan)
    return depth, np.where(P.valid, conf, 0.0)


# ---------------------------------------------------------------- full forward


def build_pyramids(views: list, net: MatchingNet) -> list:
    return [extract_features(v.image, net) for v in views]


def match_reference(ref_i: int, src_ids: list, views: list, hyp: DepthHypothesisSet,
                    net: MatchingNet, pyramids: list | None = None,
                    intra: list | None = None) -> DepthProbabilityVolume:
    """Depth probabilities for view ``ref_i`` against ``src_ids``."""
    pyramids = pyramids or build_pyramids(views, net)
    if intra is None:
        intra = [intra_transform(p, net) for p in pyramids]
    ref, srcs = views[ref_i], [views[j] for j in src_ids]
    f_ref, f_srcs = fmt_transform(pyramids[ref_i], [pyramids[j] for j in src_ids], net,
                                  [intra[ref_i]] + [intra[j] for j in src_ids])
    H, W = ref.intrinsics.height, ref.intrinsics.width
    warped, valid = [], np.zeros((H, W), dtype=bool)
    for f, s in zip(f_srcs, srcs):
        w, ok = warp_feature_map(f, hyp, ref, s)
        warped.append(w)
        valid |= ok.any(axis=0)
    vol = correlation_volume(f_ref, warped)
    return depth_probability(vol, net, hyp.depths(H, W), valid)


# ---------------------------------------------------------------- rasterising


def render_mesh_depth(mesh: TriangleMesh, view: CameraView) -> np.ndarray:
    """Z-buffer depth of a triangle mesh (NaN where empty)."""
    K = view.intrinsics
    H, W = K.height, K.width
    depth = np.full(H * W, np.inf)
    if mesh.is_empty:
        return np.full((H, W), np.nan)
    Xc = mesh.vertices @ view.pose.R.T + view.pose.t
    tri = mesh.faces[np.all(Xc[mesh.faces][:, :, 2] > 1e-6, axis=1)]
    if len(tri) == 0:
        return np.full((H, W), np.nan)
    uv = project(Xc, K)
    z = Xc[:, 2]
    a, b, c = uv[tri[:, 0]], uv[tri[:, 1]], uv[tri[:, 2]]
    lo = np.floor(np.minimum(np.minimum(a, b), c)).astype(np.int64)
    hi = np.ceil(np.maximum(np.maximum(a, b), c)).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [W - 1, H - 1])
    nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    cnt = nx * ny
    keep = cnt > 0
    tri, a, b, c, lo, nx, cnt = tri[keep], a[keep], b[keep], c[keep], lo[keep], nx[keep], cnt[keep]
    rep = np.repeat(np.arange(len(tri)), cnt)
    start = np.repeat(np.cumsum(cnt) - cnt, cnt)
    local = np.arange(len(rep)) - start
    px = lo[rep, 0] + local % nx[rep]
    py = lo[rep, 1] + local // nx[rep]
    A, B, C = a[rep], b[rep], c[rep]
    den = (B[:, 1] - C[:, 1]) * (A[:, 0] - C[:, 0]) + (C[:, 0] - B[:, 0]) * (A[:, 1] - C[:, 1])
    good = np.abs(den) > 1e-12
    den = np.where(good, den, 1.0)
    l0 = ((B[:, 1] - C[:, 1]) * (px - C[:, 0]) + (C[:, 0] - B[:, 0]) * (py - C[:, 1])) / den
    l1 = ((C[:, 1] - A[:, 1]) * (px - C[:, 0]) + (A[:, 0] - C[:, 0]) * (py - C[:, 1])) / den
    l2 = 1 - l0 - l1
    eps = -1e-9
    inside = good & (l0 >= eps) & (l1 >= eps) & (l2 >= eps)
    t = tri[rep]
    inv_z = l0 / z[t[:, 0]] + l1 / z[t[:, 1]] + l2 / z[t[:, 2]]
    zz = 1.0 / inv_z[inside]
    np.minimum.at(depth, (py[inside] * W + px[inside]), zz)
    depth[~np.isfinite(depth)] = np.nan
    return depth.reshape(H, W)


# ---------------------------------------------------------------- photo-consistency


def _gray(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=2) if img.ndim == 3 else img


def _bilinear(img: np.ndarray, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mat, ok = T.bilinear_weights(xy.reshape(-1, 2), img.shape[0], img.shape[1])
    return np.asarray(mat @ img.reshape(-1)).reshape(xy.shape[:-1]), ok.reshape(xy.shape[:-1])


def photo_consistency_terms(mesh: TriangleMesh, views: list, pairs: list, n_samples: int = 2000,
                            seed: int = 0, radius: int = 2, depth_tol: float = 0.01):
    """Per-sample NCC scores and visibility weights for every view pair.

    Returns a list of ``(ncc, weight)`` arrays; samples that fail the
    visibility tests get weight 0.
    """
    from .isosurface import sample_mesh_surface

    areas = mesh.face_areas() if not mesh.is_empty else np.zeros(0)
    if not np.any(areas > 0):
        raise DomainError("mesh has no area")
    good = TriangleMesh(mesh.vertices, mesh.faces[areas > 0])
    pc = sample_mesh_surface(good, n_samples, seed)
    x, N = pc.points, pc.normals
    zbuf = {}
    out = []
    offs = np.stack(np.meshgrid(np.arange(-radius, radius + 1), np.arange(-radius, radius + 1),
                                indexing="xy"), -1).reshape(-1, 2).astype(np.float64)
    for i, j in pairs:
        vi, vj = views[i], views[j]
        for k in (i, j):
            if k not in zbuf:
                zbuf[k] = render_mesh_depth(mesh, views[k])
        ci = vi.pose.center
        ray = x - ci
        zi = (x @ vi.pose.R.T + vi.pose.t)[:, 2]
        d_unit = ray / np.linalg.norm(ray, axis=1, keepdims=True)
        facing_i = np.sum(N * d_unit, axis=1)
        dj = x - vj.pose.center
        facing_j = np.sum(N * dj, axis=1)
        pi = project(x @ vi.pose.R.T + vi.pose.t, vi.intrinsics)
        Xj = x @ vj.pose.R.T + vj.pose.t
        pj = project(Xj, vj.intrinsics)
        vis = (facing_i < 0) & (facing_j < 0) & (zi > 0) & (Xj[:, 2] > 0)
        for view, p, zz, k in ((vi, pi, zi, i), (vj, pj, Xj[:, 2], j)):
            zb, okb = _bilinear(np.nan_to_num(zbuf[k], nan=np.inf), p)
            near = np.rint(p).astype(np.int64)
            inr = ((near[:, 0] >= 0) & (near[:, 0] < view.intrinsics.width)
                   & (near[:, 1] >= 0) & (near[:, 1] < view.intrinsics.height))
            nz = np.full(len(p), np.inf)
            nz[inr] = zbuf[k][near[inr, 1], near[inr, 0]]
            vis &= inr & (np.nan_to_num(nz, nan=np.inf) >= zz * (1 - depth_tol))
        # patch around x in view i, transferred to view j through the tangent plane
        patch_i = pi[:, None, :] + offs[None]
        rays_cam = backproject(patch_i, np.ones(patch_i.shape[:2]), vi.intrinsics)
        rays_w = rays_cam @ vi.pose.R
        num = np.sum(N * (x - ci), axis=1)
        den = np.einsum("nkc,nc->nk", rays_w, N)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = num[:, None] / den
        Xp = ci + rays_w * s[..., None]
        pj_patch = project(Xp @ vj.pose.R.T + vj.pose.t, vj.intrinsics)
        gi, oki = _bilinear(_gray(vi.image), patch_i)
        gj, okj = _bilinear(_gray(vj.image), np.where(np.isfinite(pj_patch), pj_patch, -1.0))
        vis &= oki.all(axis=1) & okj.all(axis=1) & np.all(s > 0, axis=1)
        a = gi - gi.mean(axis=1, keepdims=True)
        b = gj - gj.mean(axis=1, keepdims=True)
        nrm = np.sqrt((a * a).sum(axis=1) * (b * b).sum(axis=1))
        ncc = np.where(nrm > 1e-12, (a * b).sum(axis=1) / np.where(nrm > 1e-12, nrm, 1.0), 0.0)
        weight = np.where(vis, np.maximum(-facing_i, 0.0) / np.maximum(zi, 1e-12) ** 3, 0.0)
        out.append((ncc, weight))
    return out


def photo_consistency_loss(mesh: TriangleMesh, views: list, pairs: list, n_samples: int = 2000,
                           seed: int = 0) -> Tensor:
    """Negative visibility-weighted NCC, averaged over samples and pairs.

    The value does not depend on network parameters, so it enters training
    as a constant.
    """
    terms = photo_consistency_terms(mesh, views, pairs, n_samples, seed)
    total = sum(float(-(ncc * w).sum()) for ncc, w in terms)
    count = len(terms) * n_samples
    return Tensor(total / max(count, 1))


# ---------------------------------------------------------------- fusion


@dataclass
class FusionConfig:
    p_thresh: float = 0.3
    min_views: int = 2
    px_thresh: float = 1.0
    rel_depth: float = 0.01
    clip_unit_cube: bool = True
    min_texture: float = 0.0  # patch std below this carries no photometric evidence


def depth_normals(depth: np.ndarray, view: CameraView) -> np.ndarray:
    """World-frame normals from depth-map gradients, facing the camera.

    Pixels with a degenerate gradient get the reversed viewing ray."""
    o, dz = pixel_rays(view)
    X = o + dz * depth[..., None]
    gx = np.zeros_like(X)
    gy = np.zeros_like(X)
    gx[:, 1:-1] = X[:, 2:] - X[:, :-2]
    gy[1:-1] = X[2:] - X[:-2]
    gx[:, 0], gx[:, -1] = X[:, 1] - X[:, 0], X[:, -1] - X[:, -2]
    gy[0], gy[-1] = X[1] - X[0], X[-1] - X[-2]
    n = np.cross(gx, gy)
    ln = np.linalg.norm(n, axis=-1, keepdims=True)
    facing = -dz / np.linalg.norm(dz, axis=-1, keepdims=True)
    n = np.where(ln > 0, n / np.where(ln > 0, ln, 1.0), facing)
    flip = np.sum(n * dz, axis=-1) > 0
    n[flip] *= -1
    return n


def _consistency(i: int, depths, views, cfg: FusionConfig) -> np.ndarray:
    vi = views[i]
    d = depths[i]
    H, W = d.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    ok = np.isfinite(d)
    count = np.zeros((H, W), dtype=np.int64)
    if not ok.any():
        return count
    p = np.stack([xs[ok], ys[ok]], axis=1)
    Xw = vi.pose.R.T @ (backproject(p, d[ok], vi.intrinsics).T - vi.pose.t[:, None])
    Xw = Xw.T
    for j, vj in enumerate(views):
        if j == i:
            continue
        Xj = Xw @ vj.pose.R.T + vj.pose.t
        pj = project(Xj, vj.intrinsics)
        near = np.rint(np.nan_to_num(pj, nan=-1)).astype(np.int64)
        inr = ((Xj[:, 2] > 0) & (near[:, 0] >= 0) & (near[:, 0] < vj.intrinsics.width)
               & (near[:, 1] >= 0) & (near[:, 1] < vj.intrinsics.height))
        dj = np.full(len(p), np.nan)
        dj[inr] = depths[j][near[inr, 1], near[inr, 0]]
        good = inr & np.isfinite(dj)
        # back into view i through view j's depth
        Xb = np.full((len(p), 3), np.nan)
        if good.any():
            Xjw = backproject(near[good].astype(np.float64), dj[good], vj.intrinsics)
            Xjw = (vj.pose.R.T @ (Xjw.T - vj.pose.t[:, None])).T
            Xb[good] = Xjw @ vi.pose.R.T + vi.pose.t
        with np.errstate(invalid="ignore"):
            pb = project(Xb, vi.intrinsics)
            err = np.linalg.norm(pb - p, axis=1)
            rel = np.abs(Xb[:, 2] - d[ok]) / d[ok]
            agree = good & (err <= cfg.px_thresh) & (rel <= cfg.rel_depth)
        c = count[ok]
        c += agree
        count[ok] = c
    return count


def patch_std(image: np.ndarray, size: int = 5) -> np.ndarray:
    """Standard deviation of the grey image over ``size x size`` windows (edge-padded)."""
    g = np.asarray(image, dtype=np.float64)
    g = g.mean(axis=2) if g.ndim == 3 else g
    r = size // 2
    win = np.lib.stride_tricks.sliding_window_view(np.pad(g, r, mode="edge"), (size, size))
    return win.std(axis=(2, 3))


def fuse_view(i: int, depths: list, probs: list, views: list, cfg: FusionConfig):
    d = depths[i]
    conf = probs[i] if probs is not None else np.ones_like(d)
    count = _consistency(i, depths, views, cfg)
    keep = np.isfinite(d) & (conf >= cfg.p_thresh) & (count >= cfg.min_views)
    if cfg.min_texture > 0:
        keep &= patch_std(views[i].image) > cfg.min_texture
    o, dz = pixel_rays(views[i])
    pts = o[keep] + dz[keep] * d[keep][:, None]
    nrm = depth_normals(np.where(np.isfinite(d), d, 0.0), views[i])[keep]
    return pts, nrm


def fuse_depth_maps(depths: list, probs: list | None, views: list, cfg: FusionConfig | None = None,
                    executor=None) -> PointCloud:
    """Geometric-consistency fusion; points ordered by view then pixel."""
    cfg = cfg or FusionConfig()
    if len(views) < 2:
        raise ContractError("fusion needs at least two views")
    jobs = range(len(views))
    if executor is not None:
        parts = list(executor.map(lambda i: fuse_view(i, depths, probs, views, cfg), jobs))
    else:
        parts = [fuse_view(i, depths, probs, views, cfg) for i in jobs]
    pts = np.concatenate([p for p, _ in parts]) if parts else np.zeros((0, 3))
    nrm = np.concatenate([n for _, n in parts]) if parts else np.zeros((0, 3))
    if cfg.clip_unit_cube:
        inside = np.all((pts >= 0) & (pts <= 1), axis=1)
        pts, nrm = pts[inside], nrm[inside]
    return PointCloud(pts, nrm)
