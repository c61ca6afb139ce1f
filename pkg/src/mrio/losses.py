"""Training objectives and their multi-task combination."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import TriangleMesh
from .isosurface import boundary_vertices, curvature_terms
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

CLAMP = 1e-12


def bce_occupancy(pred, target) -> Tensor:
    """Mean binary cross-entropy between predicted and target occupancies."""
    pred = T.as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if np.any((pred.data <= 0) | (pred.data >= 1)):
        log.debug("clamping %d saturated occupancies", int(np.sum((pred.data <= 0) | (pred.data >= 1))))
    p = T.clip(pred, CLAMP, 1 - CLAMP)
    terms = -(T.log(p) * target) - T.log(1 - p) * (1 - target)
    return T.mean(terms)


def unsigned_ce(logits, target) -> Tensor:
    """Cross-entropy of sign-agnostic predictions sigmoid(|logit|)."""
    return bce_occupancy(T.sigmoid(T.tabs(T.as_tensor(logits))), target)


def smooth_loss(mesh: TriangleMesh | None = None, vertices=None, faces=None) -> Tensor:
    """Total squared principal curvature, sum over interior vertices of
    (4H^2 - 2K_G) A_v.  Differentiable w.r.t. ``vertices`` when a tensor is
    passed."""
    if mesh is not None:
        vertices, faces = mesh.vertices, mesh.faces
    faces = np.asarray(faces, dtype=np.int64)
    V = T.as_tensor(vertices)
    if len(faces) == 0:
        return Tensor(0.0)
    boundary = boundary_vertices(TriangleMesh(V.data, faces))
    lap, area, angle_sum = curvature_terms(V, faces)
    used = np.zeros(V.shape[0], dtype=bool)
    used[faces.reshape(-1)] = True
    keep = np.nonzero(used & ~boundary & (area.data > 0))[0]
    lap, area, angle_sum = lap[keep], area[keep], angle_sum[keep]
    bending = (lap * lap).sum(axis=1) / (area * 4.0)
    defect = 2 * np.pi - angle_sum
    return (bending - defect * 2.0).sum()


def field_curvature_surrogate(logit_fn, points: np.ndarray, h: float) -> Tensor:
    """Mean of (lap f / |grad f|)^2 from central differences at ``points``.

    For a distance-like field this is (2H)^2 of the level set through each
    point.  Dividing by the gradient makes it blind to rescaling f, so it
    cannot be lowered by flattening the field.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    offsets = [np.zeros(3)]
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        offsets += [e, -e]
    stencil = np.concatenate([pts + o for o in offsets])
    f = logit_fn(np.clip(stencil, 0.0, 1.0))
    c = f[0:n]
    lap, g2 = None, None
    for a in range(3):
        fp = f[(1 + 2 * a) * n:(2 + 2 * a) * n]
        fm = f[(2 + 2 * a) * n:(3 + 2 * a) * n]
        d2 = (fp + fm - c * 2.0) / (h * h)
        d1 = (fp - fm) / (2 * h)
        lap = d2 if lap is None else lap + d2
        g2 = d1 * d1 if g2 is None else g2 + d1 * d1
    return T.mean(lap * lap / (g2 + 1e-12))


def matched_surrogate(surrogate: Tensor, target_value: float) -> Tensor:
    """Rescale ``surrogate`` so its value equals ``target_value``; gradients
    keep the surrogate's direction."""
    s = float(surrogate.data)
    if s == 0 or not np.isfinite(target_value):
        return surrogate * 0.0
    return surrogate * (target_value / s)


@dataclass
class LossReport:
    L_F: float
    L_B: float
    L_S: float
    weights: dict
    total: float
    step: int = 0
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def recompute(self) -> float:
        w = self.weights
        if w.get("mode") == "fixed":
            a, b, d = w["alpha"], w["beta"], w["delta"]
            return a * self.L_F + b * self.L_B + d * self.L_S + 1 / a + 1 / b + 1 / d
        ls = [w["log_sigma1"], w["log_sigma2"], w["log_sigma3"]]
        parts = [self.L_F, self.L_B, self.L_S]
        return sum(np.exp(-2 * s) / 2 * L + s for s, L in zip(ls, parts))

    def sigmas(self) -> list:
        if self.weights.get("mode") == "fixed":
            return [None, None, None]
        return [float(np.exp(self.weights[f"log_sigma{i}"])) for i in (1, 2, 3)]

    def to_json(self) -> str:
        s1, s2, s3 = self.sigmas()
        return json.dumps({"step": self.step, "L_F": self.L_F, "L_B": self.L_B, "L_S": self.L_S,
                           "sigma1": s1, "sigma2": s2, "sigma3": s3, "total": self.total})


def _val(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def fixed_total(L_F, L_B, L_S, alpha: float, beta: float, delta: float, step: int = 0) -> LossReport:
    """Fixed-weight sum, reciprocal weight terms included."""
    if not (alpha > 0 and beta > 0 and delta > 0):
        raise ContractError("fixed weights must be positive")
    t = (T.as_tensor(L_F) * alpha + T.as_tensor(L_B) * beta + T.as_tensor(L_S) * delta
         + (1 / alpha + 1 / beta + 1 / delta))
    w = {"mode": "fixed", "alpha": alpha, "beta": beta, "delta": delta}
    return LossReport(_val(L_F), _val(L_B), _val(L_S), w, float(t.data), step, t)


def uncertainty_total(L_F, L_B, L_S, log_sigmas, step: int = 0) -> LossReport:
    """Homoscedastic weighting: sum_i exp(-2 s_i) / 2 * L_i + s_i with s = log sigma."""
    if len(log_sigmas) != 3:
        raise ContractError("need three log-sigma parameters")
    total = None
    for L, s in zip((L_F, L_B, L_S), log_sigmas):
        s = T.as_tensor(s)
        term = T.exp(s * -2.0) * 0.5 * T.as_tensor(L) + s
        total = term if total is None else total + term
    total = T.reshape(total, ())
    w = {"mode": "uncertainty"}
    for i, s in enumerate(log_sigmas, 1):
        w[f"log_sigma{i}"] = float(np.asarray(T.as_tensor(s).data).reshape(()))
    return LossReport(_val(L_F), _val(L_B), _val(L_S), w, float(total.data), step, total)


def pairwise_sqdist(x, y) -> Tensor:
    x, y = T.as_tensor(x), T.as_tensor(y)
    d = T.reshape(x, (x.shape[0], 1, x.shape[1])) - T.reshape(y, (1, y.shape[0], y.shape[1]))
    return (d * d).sum(axis=2)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    z = np.concatenate([np.asarray(x), np.asarray(y)])
    d = np.sqrt(np.maximum(pairwise_sqdist(z, z).data, 0))
    off = d[~np.eye(len(z), dtype=bool)]
    med = float(np.median(off)) if off.size else 1.0
    return med if med > 0 else 1.0


def mmd(src, tgt, bandwidth: float | None = None) -> Tensor:
    """Biased squared MMD with a Gaussian kernel.

    ``bandwidth=None`` picks the median pairwise distance of the pooled sets
    (computed on values, so it is treated as a constant).
    """
    src, tgt = T.as_tensor(src), T.as_tensor(tgt)
    if src.ndim != 2 or tgt.ndim != 2 or src.shape[1] != tgt.shape[1]:
        raise ContractError("mmd needs two (n, d) sets of equal width")
    if src.shape[0] == 0 or tgt.shape[0] == 0:
        raise ContractError("mmd needs nonempty sets")
    bw = median_bandwidth(src.data, tgt.data) if bandwidth is None else float(bandwidth)
    if not bw > 0:
        raise ContractError("bandwidth must be positive")
    c = -1.0 / (2 * bw * bw)
    kss = T.mean(T.exp(pairwise_sqdist(src, src) * c))
    ktt = T.mean(T.exp(pairwise_sqdist(tgt, tgt) * c))
    kst = T.mean(T.exp(pairwise_sqdist(src, tgt) * c))
    return kss + ktt - kst * 2.0


def adaptation_loss(L_source, mmd_value, lam: float) -> Tensor:
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    if lam == 0:
        return T.as_tensor(L_source)
    return T.as_tensor(L_source) + T.as_tensor(mmd_value) * lam
