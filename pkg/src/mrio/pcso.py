"""Occupancy field over a point cloud: per-point encoding, voxel pooling, a
small 3D conv U-stack, trilinear queries and an MLP decoder.  Includes the
sign-agnostic test-time fine-tuning loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import tensor as T
from .geometry import PointCloud, TriangleMesh
from .isosurface import mise, marching_cubes
from .losses import (bce_occupancy, field_curvature_surrogate, matched_surrogate, smooth_loss,
                     uncertainty_total, unsigned_ce)
from .nn import Module, dense, he
from .optim import OptimizerState, optimizer_step
from .tensor import ContractError, DomainError, Tensor

log = logging.getLogger(__name__)

CHUNK = 4096


class OccupancyField(Module):
    def __init__(self, grid: int = 32, feat: int = 32, hidden: int = 64, seed: int = 0,
                 dilation: int = 2):
        super().__init__()
        if grid % 2 or grid < 4:
            raise ContractError("grid must be even and at least 4")
        self.grid, self.feat, self.dilation = grid, feat, dilation
        rng = np.random.default_rng(seed)
        F = feat
        self.add_layer("enc1", W=he(rng, (3, 32), 3), b=np.zeros(32))
        self.add_layer("enc2", W=he(rng, (32, F), 32, 1.0), b=np.zeros(F))
        self.add_layer("agg1", W=he(rng, (3, 3, 3, F, F), 27 * F), b=np.zeros(F))
        self.add_layer("agg2", W=he(rng, (3, 3, 3, F, F), 27 * F, 1.0), b=np.zeros(F))
        self.add_layer("dec1", W=he(rng, (3 + F, hidden), 3 + F), b=np.zeros(hidden))
        self.add_layer("dec2", W=he(rng, (hidden, hidden), hidden), b=np.zeros(hidden))
        self.add_layer("dec3", W=he(rng, (hidden, 1), hidden, 1.0), b=np.zeros(1))
        self.volume: Tensor | None = None

    @property
    def pitch(self) -> float:
        return 1.0 / self.grid


@dataclass
class QueryBatch:
    points: np.ndarray
    targets: np.ndarray
    origin: np.ndarray  # True for surface queries

    def __len__(self):
        return len(self.points)


def _voxel_index(points: np.ndarray, g: int) -> np.ndarray:
    return np.clip(np.floor(points * g).astype(np.int64), 0, g - 1)


def _canonical_order(points: np.ndarray, g: int) -> np.ndarray:
    v = _voxel_index(points, g)
    lin = (v[:, 0] * g + v[:, 1]) * g + v[:, 2]
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0], lin))


def _check_cloud(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise DomainError("empty point cloud")
    if pts.min() < -1e-9 or pts.max() > 1 + 1e-9:
        raise ContractError("points must lie in the unit cube")
    return pts


def encode_points(cloud, fld: OccupancyField) -> Tensor:
    """Per-point features from the point's offset inside its voxel.

    Rows are computed in a canonical point order and returned in input order,
    so permuting the cloud permutes the features exactly.
    """
    pts = _check_cloud(cloud)
    g = fld.grid
    order = _canonical_order(pts, g)
    p = pts[order]
    local = (p * g - _voxel_index(p, g)) * 2.0 - 1.0
    h = dense(Tensor(local), fld.p("enc1", "W"), fld.p("enc1", "b"))
    f = dense(h, fld.p("enc2", "W"), fld.p("enc2", "b"))
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    return f[inv]


def scatter_mean(features, points: np.ndarray, g: int) -> Tensor:
    """Average point features per voxel; empty voxels are zero."""
    features = T.as_tensor(features)
    order = _canonical_order(points, g)
    v = _voxel_index(points[order], g)
    lin = (v[:, 0] * g + v[:, 1]) * g + v[:, 2]
    counts = np.bincount(lin, minlength=g ** 3).astype(np.float64)
    w = 1.0 / counts[lin]
    # columns follow the canonical order so each voxel sums in a fixed order
    mat = sp.csr_matrix((w, (lin, np.arange(len(points)))), shape=(g ** 3, len(points)))
    pooled = T.linear_map(mat, features[order])
    return T.reshape(pooled, (g, g, g, features.shape[1]))


def _pool_matrices(g: int):
    h = g // 2
    idx = np.arange(g ** 3)
    i, j, k = idx // (g * g), (idx // g) % g, idx % g
    parent = ((i // 2) * h + j // 2) * h + k // 2
    down = sp.csr_matrix((np.full(g ** 3, 0.125), (parent, idx)), shape=(h ** 3, g ** 3))
    up = sp.csr_matrix((np.ones(g ** 3), (idx, parent)), shape=(g ** 3, h ** 3))
    return down, up


_POOL_CACHE: dict = {}


def aggregate(pre: Tensor, fld: OccupancyField) -> Tensor:
    """Down 2x, two 3x3x3 convolutions, nearest up 2x, skip-add."""
    g, F = fld.grid, fld.feat
    if g not in _POOL_CACHE:
        _POOL_CACHE[g] = _pool_matrices(g)
    down, up = _POOL_CACHE[g]
    h = g // 2
    x = T.reshape(T.linear_map(down, T.reshape(pre, (g ** 3, F))), (h, h, h, F))
    x = T.relu(T.conv3d(x, fld.p("agg1", "W"), fld.p("agg1", "b")))
    x = T.relu(T.conv3d(x, fld.p("agg2", "W"), fld.p("agg2", "b"), dilation=fld.dilation))
    x = T.linear_map(up, T.reshape(x, (h ** 3, F)))
    return pre + T.reshape(x, (g, g, g, F))


def pool_to_volume(features, points: np.ndarray, fld: OccupancyField) -> Tensor:
    return aggregate(scatter_mean(features, points, fld.grid), fld)


def build_volume(cloud, fld: OccupancyField) -> Tensor:
    pts = _check_cloud(cloud)
    return pool_to_volume(encode_points(pts, fld), pts, fld)


def query_feature(V, q: np.ndarray) -> Tensor:
    return T.trilinear_sample(V, np.asarray(q, dtype=np.float64).reshape(-1, 3))


def decode_logits(q: np.ndarray, f_q: Tensor, fld: OccupancyField) -> Tensor:
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    x = T.concat([Tensor(q * 2.0 - 1.0), f_q], axis=1)
    h = dense(x, fld.p("dec1", "W"), fld.p("dec1", "b"))
    h = dense(h, fld.p("dec2", "W"), fld.p("dec2", "b"))
    return dense(h, fld.p("dec3", "W"), fld.p("dec3", "b"), act=False)[:, 0]


def decoder_hidden(q: np.ndarray, f_q: Tensor, fld: OccupancyField) -> Tensor:
    """Activations feeding the final decoder layer."""
    x = T.concat([Tensor(np.asarray(q) * 2.0 - 1.0), f_q], axis=1)
    h = dense(x, fld.p("dec1", "W"), fld.p("dec1", "b"))
    return dense(h, fld.p("dec2", "W"), fld.p("dec2", "b"))


def decode_occupancy(q, f_q, fld) -> Tensor:
    return T.sigmoid(decode_logits(q, f_q, fld))


def decode_unsigned(q, f_q, fld) -> Tensor:
    return T.sigmoid(T.tabs(decode_logits(q, f_q, fld)))


def field_logits(fld: OccupancyField, V: Tensor, q: np.ndarray) -> Tensor:
    return decode_logits(q, query_feature(V, q), fld)


def occupancy_function(fld: OccupancyField, V: Tensor, chunk: int = CHUNK):
    """Numpy occupancy callable evaluated in fixed-size padded chunks, so a
    point's value does not depend on which batch it arrives in."""
    Vd = Tensor(V.data)

    def fn(points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(pts))
        for s in range(0, len(pts), chunk):
            block = pts[s:s + chunk]
            pad = np.full((chunk, 3), 0.5)
            pad[:len(block)] = block
            out[s:s + len(block)] = T.sigmoid(field_logits(fld, Vd, pad)).data[:len(block)]
        return out
    return fn


def extract(fld: OccupancyField, V: Tensor, coarse: int = 16, target: int = 64,
            isovalue: float = 0.5) -> TriangleMesh:
    return marching_cubes(mise(occupancy_function(fld, V), coarse, target, isovalue))


def sample_targets(cloud, m_surface: int, m_volume: int, seed: int, rho: float,
                   tree: cKDTree | None = None, band: float = 0.0) -> QueryBatch:
    """Surface queries from the cloud (target 0.5) and free-space queries
    (target 1.0) at least ``rho`` away from every cloud point.

    With ``band > 0`` free-space candidates are cloud points jittered by
    N(0, band^2) instead of uniform over the cube.
    """
    pts = _check_cloud(cloud)
    rng = np.random.default_rng(seed)
    surf = pts[rng.choice(len(pts), size=m_surface, replace=m_surface > len(pts))]
    vol = np.empty((0, 3))
    if m_volume:
        tree = tree or cKDTree(pts)
        for _ in range(1000):
            n_c = 2 * (m_volume - len(vol)) + 16
            if band > 0:
                cand = pts[rng.integers(0, len(pts), n_c)] + rng.normal(0, band, (n_c, 3))
                cand = cand[np.all((cand >= 0) & (cand <= 1), axis=1)]
            else:
                cand = rng.uniform(0, 1, (n_c, 3))
            if rho > 0:
                d, _ = tree.query(cand)
                cand = cand[d >= rho]
            vol = np.concatenate([vol, cand])[:m_volume]
            if len(vol) == m_volume:
                break
        else:
            raise DomainError("could not place free-space queries; rho too large")
    q = np.concatenate([surf, vol])
    t = np.concatenate([np.full(m_surface, 0.5), np.full(len(vol), 1.0)])
    o = np.concatenate([np.ones(m_surface, bool), np.zeros(len(vol), bool)])
    return QueryBatch(q, t, o)


# ---------------------------------------------------------------- fine-tuning


@dataclass
class FinetuneConfig:
    iterations: int = 1000
    learning_rate: float = 3e-5
    decay_factor: float = 0.3
    decay_every: int = 400
    m_surface: int = 1024
    m_volume: int = 1024
    rho_pitches: float = 1.5
    band_pitches: float = 4.0
    scope: str = "decoder"  # or "all"
    smooth: bool = True
    smooth_every: int = 100
    smooth_points: int = 512
    smooth_support: float = 0.0  # pitches from the cloud; 0 samples the whole mesh
    seed: int = 0

    def __post_init__(self):
        if self.scope not in ("decoder", "all"):
            raise ContractError(f"unknown fine-tune scope {self.scope!r}")
        if self.iterations < 0:
            raise ContractError("iterations must be non-negative")


@dataclass
class FinetuneResult:
    field: OccupancyField
    volume: Tensor
    log: list = field(default_factory=list)
    log_sigmas: list = field(default_factory=list)


def sign_agnostic_finetune(fld: OccupancyField, cloud, cfg: FinetuneConfig | None = None,
                           L_F: float = 0.0, log_sigmas=None) -> FinetuneResult:
    """Fit the field to an unoriented cloud with the unsigned cross-entropy
    plus the curvature penalty, combined with learned uncertainty weights.

    Returns a copy; the input field is not modified.  Without ``log_sigmas``
    each weight starts where sigma^2 equals its first-step loss.
    """
    cfg = cfg or FinetuneConfig()
    pts = _check_cloud(cloud)
    fld = fld.clone()
    sig = [Tensor(np.array(float(s)), requires_grad=True) for s in (log_sigmas or [0.0, 0.0, 0.0])]
    sig3_set = log_sigmas is not None
    tree = cKDTree(pts)
    rho = cfg.rho_pitches * fld.pitch
    if cfg.scope == "decoder":
        with T.no_tape():
            V_fixed = build_volume(pts, fld)
        params = [t for t in fld.layer_params({"dec1", "dec2", "dec3"}) if t.name not in fld.frozen]
    else:
        V_fixed = None
        params = fld.trainable()
    opt = OptimizerState("adam", cfg.learning_rate, cfg.decay_factor, cfg.decay_every)
    history = []
    surrogate_pts, mesh_value = None, 0.0
    for it in range(cfg.iterations):
        if cfg.smooth and it % cfg.smooth_every == 0:
            V_now = V_fixed if V_fixed is not None else build_volume(pts, fld)
            mesh = extract(fld, V_now)
            if mesh.is_empty:
                surrogate_pts, mesh_value = None, 0.0
            else:
                mesh_value = float(smooth_loss(mesh).data)
                if not sig3_set and mesh_value > 0:
                    # start at the stationary point sigma^2 = L_S
                    sig[2].data = np.array(0.5 * np.log(mesh_value))
                    sig3_set = True
                cand = mesh.vertices
                if cfg.smooth_support > 0:
                    d, _ = tree.query(cand)
                    cand = cand[d <= cfg.smooth_support * fld.pitch]
                srng = np.random.default_rng(cfg.seed * 7919 + it)
                k = min(cfg.smooth_points, len(cand))
                surrogate_pts = cand[srng.choice(len(cand), k, replace=False)] if k else None
        batch = sample_targets(pts, cfg.m_surface, cfg.m_volume, cfg.seed * 100003 + it, rho, tree,
                               cfg.band_pitches * fld.pitch)
        with T.Tape() as tape:
            V = V_fixed if V_fixed is not None else build_volume(pts, fld)
            L_B = unsigned_ce(field_logits(fld, V, batch.points), batch.targets)
            if surrogate_pts is not None:
                s = field_curvature_surrogate(lambda q: field_logits(fld, V, q), surrogate_pts, fld.pitch)
                L_S = matched_surrogate(s, mesh_value)
            else:
                L_S = Tensor(0.0)
            if it == 0 and log_sigmas is None:
                # start every weight at its stationary point for the first losses
                for t, L in zip(sig, (L_F, L_B.data, L_S.data)):
                    if float(L) > 0:
                        t.data = np.array(0.5 * np.log(float(L)))
            report = uncertainty_total(L_F, L_B, L_S, sig, step=it)
        grads = T.backward(tape, report.tensor, params + sig)
        optimizer_step(opt, params + sig, grads)
        report.tensor = None  # do not keep the graph alive
        history.append(report)
    with T.no_tape():
        V_final = V_fixed if V_fixed is not None else build_volume(pts, fld)
    return FinetuneResult(fld, Tensor(V_final.data), history, [float(s.data) for s in sig])


def unsigned_loss(fld: OccupancyField, cloud, seed: int = 0, m: int = 2048) -> float:
    """Unsigned cross-entropy on a fixed query batch (for before/after checks)."""
    pts = _check_cloud(cloud)
    batch = sample_targets(pts, m, m, seed, 1.5 * fld.pitch)
    with T.no_tape():
        V = build_volume(pts, fld)
        return float(unsigned_ce(field_logits(fld, V, batch.points), batch.targets).data)


def supervised_loss(fld: OccupancyField, V: Tensor, q: np.ndarray, inside: np.ndarray) -> Tensor:
    return bce_occupancy(T.sigmoid(field_logits(fld, V, q)), inside.astype(np.float64))
