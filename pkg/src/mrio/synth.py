"""Procedural ground-truth scenes: analytic SDF shapes, camera rings and
textured Lambertian renders inside the unit cube."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .camera import (CameraIntrinsics, CameraPose, CameraView, DepthHypothesisSet,
                     pixel_rays, render_depth_from_sdf)
from .geometry import PointCloud
from .tensor import ContractError


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def sdf(self, x):
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius

    def gradient(self, x):
        d = x - np.asarray(self.center)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def area(self):
        return 4 * np.pi * self.radius ** 2

    def bound(self):
        return self.radius

    def sample(self, n, rng):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * d


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple

    def sdf(self, x):
        q = np.abs(x - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)

    def gradient(self, x):
        p = x - np.asarray(self.center)
        q = np.abs(p) - np.asarray(self.half)
        out = np.maximum(q, 0.0)
        ln = np.linalg.norm(out, axis=-1, keepdims=True)
        g_out = np.sign(p) * out / np.where(ln > 0, ln, 1.0)
        face = np.argmax(q, axis=-1)
        g_in = np.zeros_like(p)
        np.put_along_axis(g_in, face[..., None], np.take_along_axis(np.sign(p), face[..., None], -1), -1)
        return np.where(ln > 0, g_out, g_in)

    def area(self):
        a, b, c = (2 * np.asarray(self.half))
        return 2 * (a * b + b * c + a * c)

    def bound(self):
        return float(np.linalg.norm(self.half))

    def sample(self, n, rng):
        h = np.asarray(self.half)
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]] * 2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1, 1, size=(n, 3)) * h
        axis = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        pts[np.arange(n), axis] = sign * h[axis]
        return pts + np.asarray(self.center)


@dataclass(frozen=True)
class Torus:
    """Torus around the z axis through ``center`` with radii (major, minor)."""

    center: tuple
    radii: tuple

    def sdf(self, x):
        p = x - np.asarray(self.center)
        R, r = self.radii
        q = np.hypot(p[..., 0], p[..., 1]) - R
        return np.hypot(q, p[..., 2]) - r

    def gradient(self, x):
        p = x - np.asarray(self.center)
        R, _ = self.radii
        rho = np.hypot(p[..., 0], p[..., 1])
        ring = np.stack([p[..., 0] / rho * R, p[..., 1] / rho * R, np.zeros_like(rho)], -1)
        d = p - ring
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def area(self):
        R, r = self.radii
        return 4 * np.pi ** 2 * R * r

    def bound(self):
        return float(sum(self.radii))

    def sample(self, n, rng):
        R, r = self.radii
        out = np.empty((0, 3))
        while len(out) < n:
            m = 2 * (n - len(out)) + 16
            theta = rng.uniform(0, 2 * np.pi, m)
            phi = rng.uniform(0, 2 * np.pi, m)
            keep = rng.uniform(0, R + r, m) < R + r * np.cos(theta)
            theta, phi = theta[keep], phi[keep]
            pts = np.stack([(R + r * np.cos(theta)) * np.cos(phi),
                            (R + r * np.cos(theta)) * np.sin(phi),
                            r * np.sin(theta)], axis=1)
            out = np.concatenate([out, pts])
        return out[:n] + np.asarray(self.center)


@dataclass
class SceneSpec:
    shapes: Sequence = (Sphere((0.5, 0.5, 0.5), 0.25),)
    texture_seed: int = 0
    n_views: int = 5
    rig_radius: float = 1.5
    elevation_deg: float = 30.0
    look_at: tuple = (0.5, 0.5, 0.5)
    width: int = 64
    height: int = 64
    focal_scale: float = 1.5
    noise: float = 0.0
    hypotheses: int = 64

    def __post_init__(self):
        if self.n_views < 2:
            raise ContractError("a rig needs at least two views")
        if not self.shapes:
            raise ContractError("scene has no shapes")


class Texture:
    """Three random-frequency 3D sinusoids mixed per colour channel."""

    def __init__(self, seed: int, channels: int = 3):
        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=(3, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        self.freqs = dirs * rng.uniform(25.0, 55.0, size=(3, 1))
        self.phases = rng.uniform(0, 2 * np.pi, size=3)
        w = rng.uniform(0.3, 1.0, size=(3, channels))
        self.weights = 0.4 * w / w.sum(axis=0)

    def __call__(self, x):
        s = np.sin(x @ self.freqs.T + self.phases)
        return 0.5 + s @ self.weights


@dataclass
class GroundTruth:
    shapes: tuple
    surface: PointCloud
    depths: list = field(default_factory=list)

    def sdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.min([s.sdf(x) for s in self.shapes], axis=0)

    def normal(self, x):
        x = np.asarray(x, dtype=np.float64)
        vals = np.stack([s.sdf(x) for s in self.shapes])
        grads = np.stack([s.gradient(x) for s in self.shapes])
        pick = np.argmin(vals, axis=0)
        g = np.take_along_axis(grads, pick[None, ..., None], axis=0)[0]
        return g / np.linalg.norm(g, axis=-1, keepdims=True)


@dataclass
class Scene:
    spec: SceneSpec
    truth: GroundTruth
    views: list
    hypotheses: DepthHypothesisSet


def make_rig(spec: SceneSpec) -> list[tuple[CameraIntrinsics, CameraPose]]:
    f = spec.focal_scale * spec.width
    K = CameraIntrinsics(f, f, (spec.width - 1) / 2, (spec.height - 1) / 2, spec.width, spec.height)
    e = np.deg2rad(spec.elevation_deg)
    look = np.asarray(spec.look_at, dtype=np.float64)
    rig = []
    for k in range(spec.n_views):
        a = 2 * np.pi * k / spec.n_views
        eye = look + spec.rig_radius * np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
        rig.append((K, CameraPose.look_at(eye, look)))
    return rig


def sample_surface(truth: GroundTruth, n: int, seed: int) -> PointCloud:
    """Area-uniform points on the union surface with analytic normals."""
    if n < 1:
        raise ContractError("need at least one sample")
    rng = np.random.default_rng(seed)
    shapes = truth.shapes
    areas = np.array([s.area() for s in shapes])
    pts = np.empty((0, 3))
    while len(pts) < n:
        m = 2 * (n - len(pts)) + 8
        counts = rng.multinomial(m, areas / areas.sum())
        cand = np.concatenate([s.sample(c, rng) for s, c in zip(shapes, counts)])
        cand = cand[rng.permutation(len(cand))]
        # drop parts of one shape buried inside another
        cand = cand[np.abs(truth.sdf(cand)) < 1e-9]
        pts = np.concatenate([pts, cand])
    pts = pts[:n]
    return PointCloud(pts, truth.normal(pts))


def shade(view_points: np.ndarray, normals: np.ndarray, texture: Texture) -> np.ndarray:
    light = np.array([0.3, -0.2, 0.93])
    light /= np.linalg.norm(light)
    lam = np.clip(normals @ light, 0.0, None)
    return texture(view_points) * (0.35 + 0.65 * lam)[..., None]


def build_scene(spec: SceneSpec, surface_samples: int = 20000) -> Scene:
    """Render every rig view of ``spec`` with ground-truth depth."""
    truth = GroundTruth(tuple(spec.shapes), PointCloud(np.zeros((0, 3))))
    texture = Texture(spec.texture_seed)
    look = np.asarray(spec.look_at)
    extent = max(np.linalg.norm(np.asarray(s.center) - look) + s.bound() for s in spec.shapes)
    margin = 0.1
    d_min = max(0.05, spec.rig_radius - extent - margin)
    d_max = spec.rig_radius + extent + margin
    noise_rng = np.random.default_rng(spec.texture_seed + 7919)
    views = []
    for K, pose in make_rig(spec):
        view = CameraView(K, pose, np.zeros((K.height, K.width, 3)))
        depth = render_depth_from_sdf(truth.sdf, view, spec.rig_radius + 2.0)
        origin, dz = pixel_rays(view)
        hit = np.isfinite(depth)
        img = np.zeros((K.height, K.width, 3))
        X = origin[hit] + dz[hit] * depth[hit][:, None]
        img[hit] = shade(X, truth.normal(X), texture)
        if spec.noise > 0:
            img = img + noise_rng.normal(0.0, spec.noise, img.shape)
        views.append(CameraView(K, pose, img, depth))
    truth.depths = [v.gt_depth for v in views]
    truth.surface = sample_surface(truth, surface_samples, spec.texture_seed + 1)
    hyp = DepthHypothesisSet(d_min, d_max, spec.hypotheses, "inverse")
    return Scene(spec, truth, views, hyp)


def perturb_cloud(cloud: PointCloud, sigma: float, dropout: float, seed: int) -> PointCloud:
    """Gaussian jitter plus random point removal."""
    if sigma < 0 or not 0 <= dropout < 1:
        raise ContractError("need sigma >= 0 and dropout in [0, 1)")
    if sigma == 0 and dropout == 0:
        return PointCloud(cloud.points.copy(),
                          None if cloud.normals is None else cloud.normals.copy())
    rng = np.random.default_rng(seed)
    keep = rng.uniform(size=len(cloud)) >= dropout
    pts = cloud.points + rng.normal(0.0, sigma, cloud.points.shape) if sigma > 0 else cloud.points.copy()
    normals = None if cloud.normals is None else cloud.normals[keep]
    return PointCloud(pts[keep], normals)


SCENE_KINDS = ("sphere", "box", "torus")


def random_shape(kind: str, rng: np.random.Generator):
    c = tuple(0.5 + rng.uniform(-0.05, 0.05, 3))
    if kind == "sphere":
        return Sphere(c, float(rng.uniform(0.2, 0.3)))
    if kind == "box":
        return Box(c, tuple(rng.uniform(0.13, 0.21, 3)))
    if kind == "torus":
        R = float(rng.uniform(0.2, 0.26))
        return Torus(c, (R, float(rng.uniform(0.08, 0.11))))
    raise ContractError(f"unknown shape kind {kind!r}")


def random_scene(kind: str, seed: int, **overrides) -> SceneSpec:
    """A single centred shape of ``kind`` with seeded size and texture."""
    rng = np.random.default_rng(seed)
    return SceneSpec(shapes=(random_shape(kind, rng),), texture_seed=seed, **overrides)
