"""Pinhole cameras, plane-sweep warping and sphere-traced depth rendering.

Pixel coordinates are (x, y) with integer values at pixel centres.  Poses map
world to camera coordinates: ``X_cam = R @ X_world + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ContractError, DomainError, Tensor


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractError("principal point outside the raster")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for a raster resampled so that pixel ``x`` maps to ``x * factor``."""
        return CameraIntrinsics(self.fx * factor, self.fy * factor, self.cx * factor,
                                self.cy * factor, int(round(self.width * factor)),
                                int(round(self.height * factor)))


@dataclass(frozen=True)
class CameraPose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-10 or abs(np.linalg.det(R) - 1) > 1e-10:
            raise ContractError("R is not a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3], m[:3, 3] = self.R, self.t
        return m

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        """Camera at ``eye`` looking at ``target``; image y runs down."""
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-12:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        # re-orthonormalise so the rotation checks hold to 1e-10
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return cls(R, -R @ eye)


@dataclass
class CameraView:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    image: np.ndarray
    gt_depth: np.ndarray | None = None

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.shape[:2] != (self.intrinsics.height, self.intrinsics.width):
            raise ContractError(f"raster {img.shape[:2]} does not match intrinsics")
        self.image = img


@dataclass
class DepthHypothesisSet:
    """Depth planes swept per pixel.

    When ``centers`` is set, pixels with a finite centre use the range
    ``center * (1 -/+ rel_halfwidth)``; other pixels keep ``[d_min, d_max]``.
    """

    d_min: float
    d_max: float
    count: int = 64
    spacing: str = "inverse"
    centers: np.ndarray | None = None
    rel_halfwidth: float = 0.0

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ContractError("need 0 < d_min < d_max")
        if self.count < 2:
            raise ContractError("need at least two hypotheses")
        if self.spacing not in ("inverse", "depth"):
            raise ContractError(f"unknown spacing {self.spacing!r}")

    def _planes(self, lo, hi) -> np.ndarray:
        s = np.linspace(0.0, 1.0, self.count).reshape((-1,) + (1,) * np.ndim(lo))
        if self.spacing == "depth":
            return lo + (hi - lo) * s
        return 1.0 / (1.0 / lo + (1.0 / hi - 1.0 / lo) * s)

    def ranges(self, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full((height, width), float(self.d_min))
        hi = np.full((height, width), float(self.d_max))
        if self.centers is not None:
            if self.centers.shape != (height, width):
                raise ContractError("centre map does not match the raster")
            ok = np.isfinite(self.centers)
            lo[ok] = self.centers[ok] * (1 - self.rel_halfwidth)
            hi[ok] = self.centers[ok] * (1 + self.rel_halfwidth)
        return lo, hi

    def depths(self, height: int, width: int) -> np.ndarray:
        """``count x height x width`` array of hypothesis depths."""
        lo, hi = self.ranges(height, width)
        return self._planes(lo, hi)

    def resized(self, height: int, width: int) -> "DepthHypothesisSet":
        """Same set with the centre map nearest-resampled to a new raster."""
        if self.centers is None or self.centers.shape == (height, width):
            return self
        h0, w0 = self.centers.shape
        ys = np.minimum((np.arange(height) * h0) // height, h0 - 1)
        xs = np.minimum((np.arange(width) * w0) // width, w0 - 1)
        return replace(self, centers=self.centers[np.ix_(ys, xs)])


def backproject(p, d, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point(s) at z-depth ``d`` along the ray through pixel ``p``."""
    p = np.asarray(p, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise DomainError("depth must be positive")
    x = (p[..., 0] - K.cx) / K.fx * d
    y = (p[..., 1] - K.cy) / K.fy * d
    return np.stack([x, y, np.broadcast_to(d, x.shape)], axis=-1)


def project(X, K: CameraIntrinsics) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * X[..., 0] / X[..., 2] + K.cx
        v = K.fy * X[..., 1] / X[..., 2] + K.cy
    return np.stack([u, v], axis=-1)


def relative_pose(ref: CameraPose, src: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Transform from the reference camera frame into the source frame."""
    R = src.R @ ref.R.T
    return R, src.t - R @ ref.t


def warp_points(p: np.ndarray, d: np.ndarray, ref: CameraView, src: CameraView):
    """Vectorised pixel warp; returns ``(p_src, depth_in_src, valid)``."""
    R, t = relative_pose(ref.pose, src.pose)
    X = backproject(p, d, ref.intrinsics)
    K = src.intrinsics
    same_pose = np.array_equal(ref.pose.R, src.pose.R) and np.array_equal(ref.pose.t, src.pose.t)
    if ref.intrinsics == K and (same_pose or (np.array_equal(R, np.eye(3)) and not t.any())):
        # same camera: skip the round trip so the map is exactly the identity
        ps = np.broadcast_to(np.asarray(p, dtype=np.float64), X.shape[:-1] + (2,)).copy()
        z = X[..., 2]
    else:
        Xs = X @ R.T + t
        ps = project(Xs, K)
        z = Xs[..., 2]
    valid = ((z > 0) & (ps[..., 0] >= 0) & (ps[..., 0] <= K.width - 1)
             & (ps[..., 1] >= 0) & (ps[..., 1] <= K.height - 1))
    return ps, z, valid


def warp_pixel(p, d: float, ref: CameraView, src: CameraView) -> tuple[np.ndarray, bool]:
    """Map a reference pixel at depth ``d`` into the source raster.

    The result may fall outside the raster; ``valid`` says whether it lands
    inside and in front of the source camera.
    """
    if d <= 0:
        raise DomainError("depth must be positive")
    ps, _, valid = warp_points(np.asarray(p, dtype=np.float64), np.asarray(d, dtype=np.float64), ref, src)
    return ps, bool(valid)


def _view_at_scale(view: CameraView, height: int, width: int) -> CameraView:
    K = view.intrinsics
    if (K.height, K.width) == (height, width):
        return view
    factor = height / K.height
    if abs(width / K.width - factor) > 1e-12:
        raise ContractError("feature map aspect differs from the raster")
    return CameraView(K.scaled(factor), view.pose, np.zeros((height, width, 1)))


def warp_feature_map(src_features, hypotheses: DepthHypothesisSet, ref: CameraView, src: CameraView):
    """Plane-sweep the source features onto the reference view.

    ``src_features`` is ``h x w x F``, possibly downscaled relative to the
    camera rasters (intrinsics are scaled to match).  Returns a
    ``D x h x w x F`` tensor and a ``D x h x w`` validity mask; invalid
    samples are zero.
    """
    src_features = T.as_tensor(src_features)
    h, w = src_features.shape[:2]
    ref_s = _view_at_scale(ref, h, w)
    src_s = _view_at_scale(src, h, w)
    depths = hypotheses.resized(h, w).depths(h, w)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pix = np.broadcast_to(np.stack([xs, ys], axis=-1), depths.shape + (2,))
    ps, z, valid = warp_points(pix, depths, ref_s, src_s)
    coords = np.where((z > 0)[..., None], ps, np.nan).reshape(-1, 2)
    samples, ok = T.bilinear_sample(src_features, coords)
    out = T.reshape(samples, depths.shape + (src_features.shape[2],))
    return out, (ok.reshape(depths.shape) & valid)


def pixel_rays(view: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray origins and directions scaled to unit z-depth."""
    K = view.intrinsics
    ys, xs = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    d_cam = backproject(np.stack([xs, ys], axis=-1), np.ones_like(xs), K)
    d_world = d_cam @ view.pose.R
    origin = np.broadcast_to(view.pose.center, d_world.shape)
    return origin, d_world


def render_depth_from_sdf(sdf: Callable[[np.ndarray], np.ndarray], view: CameraView,
                          max_dist: float, tol: float = 1e-9, max_steps: int = 400) -> np.ndarray:
    """Sphere-trace the first zero of ``sdf`` per pixel; misses are NaN.

    Depth is the camera-frame z of the hit point.
    """
    origin, dz = pixel_rays(view)
    o = origin.reshape(-1, 3)
    scale = np.linalg.norm(dz.reshape(-1, 3), axis=1)
    direction = dz.reshape(-1, 3) / scale[:, None]
    t = np.zeros(len(o))
    active = np.ones(len(o), dtype=bool)
    hit = np.zeros(len(o), dtype=bool)
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        dist = sdf(o[idx] + t[idx, None] * direction[idx])
        done = dist < tol
        hit[idx[done]] = True
        active[idx[done]] = False
        t[idx[~done]] += dist[~done]
        far = t > max_dist
        active &= ~far
    depth = np.where(hit, t / scale, np.nan)
    return depth.reshape(view.intrinsics.height, view.intrinsics.width)


# ---------------------------------------------------------------- cam.txt


def write_cam(path, view: CameraView, hypotheses: DepthHypothesisSet) -> None:
    lines = ["extrinsic"]
    lines += [" ".join(repr(float(v)) for v in row) for row in view.pose.matrix()]
    lines += ["", "intrinsic"]
    lines += [" ".join(repr(float(v)) for v in row) for row in view.intrinsics.K]
    interval = (hypotheses.d_max - hypotheses.d_min) / (hypotheses.count - 1)
    lines += ["", f"depth {float(hypotheses.d_min)!r} {float(interval)!r} {hypotheses.count}", ""]
    Path(path).write_text("\n".join(lines))


def read_cam(path, width: int, height: int, spacing: str = "inverse"):
    """Parse a cam file; returns ``(CameraIntrinsics, CameraPose, DepthHypothesisSet)``."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    try:
        i = lines.index("extrinsic")
        E = np.array([[float(v) for v in lines[i + 1 + r].split()] for r in range(4)])
        j = lines.index("intrinsic")
        K = np.array([[float(v) for v in lines[j + 1 + r].split()] for r in range(3)])
        dl = next(ln for ln in lines if ln.startswith("depth"))
        _, d_min, d_int, d_count = dl.split()
    except (ValueError, StopIteration, IndexError) as exc:
        raise ValueError(f"{path}: malformed camera file ({exc})") from exc
    intr = CameraIntrinsics(K[0, 0], K[1, 1], K[0, 2], K[1, 2], width, height)
    pose = CameraPose(E[:3, :3], E[:3, 3])
    count = int(d_count)
    d_min = float(d_min)
    hyp = DepthHypothesisSet(d_min, d_min + float(d_int) * (count - 1), count, spacing)
    return intr, pose, hyp
