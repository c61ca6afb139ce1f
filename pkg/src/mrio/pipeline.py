"""The recurrent reconstruction loop, pre-training, adaptation and
checkpoint files.

One round: match every view against the others, fuse the depth maps, fine-tune
the occupancy field on the fused cloud, extract a mesh, score it for
photo-consistency, then render it back into each view to narrow the depth
hypotheses of the next round.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, replace
from dataclasses import field as dc_field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from threadpoolctl import threadpool_limits

from . import mvdm, pcso
from . import tensor as T
from .camera import CameraView, DepthHypothesisSet
from .config import Config
from .geometry import PointCloud, TriangleMesh
from .isosurface import sample_mesh_surface
from .losses import bce_occupancy, mmd
from .metrics import evaluate
from .nn import Module
from .optim import OptimizerState, optimizer_step
from .synth import GroundTruth, build_scene, make_rig, perturb_cloud, random_scene, sample_surface
from .tensor import ContractError, DomainError, Tensor

log = logging.getLogger(__name__)

MAGIC = b"MRIO"
VERSION = 1
MIN_FUSED_POINTS = 100
CARRY_PITCHES = 2.0


class PipelineError(DomainError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, blocks: dict) -> None:
    """Write named float64 arrays: magic, u32 version, u32 count, then per
    block a u32-prefixed UTF-8 name, u32 rank, u64 extents and the data."""
    out = [MAGIC, struct.pack("<II", VERSION, len(blocks))]
    for name in sorted(blocks):
        arr = np.asarray(blocks[name], dtype="<f8")
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    blocks = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return blocks


@dataclass
class Models:
    matcher: mvdm.MatchingNet
    field: pcso.OccupancyField

    def blocks(self) -> dict:
        out = {f"mvdm/{k}": v for k, v in self.matcher.state().items()}
        out.update({f"pcso/{k}": v for k, v in self.field.state().items()})
        return out

    def clone(self) -> "Models":
        return Models(self.matcher.clone(), self.field.clone())


def _split(blocks: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in blocks.items() if k.startswith(prefix)}


def save_models(path, models: Models) -> None:
    save_checkpoint(path, models.blocks())


def load_models(path, cfg: Config | None = None) -> Models:
    cfg = cfg or Config()
    blocks = load_checkpoint(path)
    models = fresh_models(cfg)
    models.matcher.load_state(_split(blocks, "mvdm/"))
    models.field.load_state(_split(blocks, "pcso/"))
    return models


def fresh_models(cfg: Config) -> Models:
    return Models(mvdm.MatchingNet(seed=cfg.seed), pcso.OccupancyField(grid=cfg.grid, seed=cfg.seed))


def default_checkpoint() -> Path:
    return Path(str(resources.files("mrio") / "data" / "pretrained.mrio"))


def default_models(cfg: Config | None = None) -> Models:
    """The bundled pre-trained weights (see ``mrio pretrain``)."""
    path = default_checkpoint()
    if not path.exists():
        raise CheckpointError(f"bundled weights missing at {path}; run `mrio pretrain`")
    return load_models(path, cfg)


# ---------------------------------------------------------------- threading


@contextmanager
def worker_pool(threads: int):
    """BLAS pinned to one thread; ``threads > 1`` adds a Python pool whose
    results are always assembled in submission order."""
    if threads < 1:
        raise ContractError("threads must be >= 1")
    with threadpool_limits(limits=1):
        if threads == 1:
            yield None
        else:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                yield ex


def _map(executor, fn, items) -> list:
    return list(executor.map(fn, items)) if executor is not None else [fn(i) for i in items]


# ---------------------------------------------------------------- pre-training


def rig_facing(cloud: PointCloud, spec, min_views: int = 3) -> np.ndarray:
    """Mask of points whose normal faces at least ``min_views`` rig cameras,
    a cheap stand-in for what multi-view fusion can recover."""
    centers = np.array([pose.center for _, pose in make_rig(spec)])
    facing = np.einsum("ckd,nd->nc", centers[:, None] - cloud.points[None], cloud.normals) > 0
    return facing.sum(axis=1) >= min_views


def _occupancy_sample(kinds, index: int, rng: np.random.Generator, n_queries: int = 2048):
    """A noisy cloud of a random training shape plus labelled queries: a third
    uniform, a third in the central box, a third near the surface.  Odd
    indices keep only the rig-facing part of the surface, so the field also
    learns to close what the cameras never see (3 or 4 facing views
    bracket the coverage of real fused clouds)."""
    spec = random_scene(kinds[index % len(kinds)], 1000 + index)
    gt = GroundTruth(spec.shapes, None)
    surf = sample_surface(gt, 2000, index)
    if index % 2:
        surf = surf.subset(np.nonzero(rig_facing(surf, spec, 3 + (index // 2) % 2))[0])
    cloud = perturb_cloud(surf, 0.004, 0.3, index)
    pts = np.clip(cloud.points, 0.0, 1.0)
    k = n_queries // 3
    near = sample_surface(gt, n_queries - 2 * k, index + 5).points
    q = np.concatenate([rng.uniform(size=(k, 3)), rng.uniform(0.2, 0.8, size=(k, 3)),
                        np.clip(near + rng.normal(0, 0.03, near.shape), 0, 1)])
    return pts, q, gt.sdf(q) < 0


def pretrain_field(fld: pcso.OccupancyField, cfg: Config, kinds=("sphere", "box", "torus"),
                   iterations: int | None = None) -> list:
    """Supervised occupancy training on procedural shapes (labels from the SDF sign)."""
    iterations = cfg.pretrain_iterations if iterations is None else iterations
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState("adam", cfg.pretrain_lr)
    params = fld.trainable()
    losses = []
    for it in range(iterations):
        pts, q, inside = _occupancy_sample(kinds, it, rng)
        with T.Tape() as tape:
            V = pcso.build_volume(pts, fld)
            L = pcso.supervised_loss(fld, V, q, inside)
        optimizer_step(opt, params, T.backward(tape, L, params))
        losses.append(L.item())
        if it % 100 == 0:
            log.info("field pretrain %d: %.4f", it, L.item())
    return losses


def training_scenes(kinds=("sphere", "box", "torus"), n: int = 12, base_seed: int = 100,
                    views: int = 5) -> list:
    return [build_scene(random_scene(kinds[i % len(kinds)], base_seed + i, n_views=views),
                        surface_samples=2000) for i in range(n)]


def pretrain_matcher(net: mvdm.MatchingNet, cfg: Config, scenes: list | None = None,
                     iterations: int | None = None) -> list:
    """Focal-loss training on rendered scenes, one reference and its two ring
    neighbours per step.  Odd steps sweep a narrowed hypothesis set centred
    on a perturbed ground-truth depth, the situation of the later rounds."""
    iterations = cfg.match_iterations if iterations is None else iterations
    scenes = scenes or training_scenes(views=cfg.views)
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState("adam", cfg.match_lr, cfg.match_decay, cfg.match_decay_every)
    params = net.trainable()
    losses = []
    for it in range(iterations):
        sc = scenes[it % len(scenes)]
        n = len(sc.views)
        r = int(rng.integers(n))
        hyp = sc.hypotheses
        if it % 2:
            gt = sc.views[r].gt_depth
            prior = gt * (1 + rng.normal(0, 0.01) + rng.normal(0, 0.01, gt.shape))
            hyp = narrow_hypotheses(prior, hyp, cfg.width_factor)
        with T.Tape() as tape:
            P = mvdm.match_reference(r, [(r + 1) % n, (r - 1) % n], sc.views, hyp, net)
            L = mvdm.focal_loss(P, sc.views[r].gt_depth, cfg.gamma)
        optimizer_step(opt, params, T.backward(tape, L, params))
        losses.append(L.item())
        if it % 20 == 0:
            log.info("matcher pretrain %d: %.4f", it, L.item())
    return losses


# ---------------------------------------------------------------- feedback


def render_depth_prior(mesh: TriangleMesh, views: list) -> list:
    """Per-view nearest-hit depth of ``mesh``; NaN where no triangle covers a pixel."""
    if mesh.is_empty:
        raise DomainError("cannot render an empty mesh")
    return [mvdm.render_mesh_depth(mesh, v) for v in views]


def narrow_hypotheses(prior: np.ndarray | None, base: DepthHypothesisSet,
                      width_factor: float = 0.25) -> DepthHypothesisSet:
    """Centre each pixel's sweep on its prior depth with half-width
    ``w * rho`` (relative), rho = (d_max - d_min) / (d_max + d_min).  Pixels
    without a prior keep the base range; the hypothesis count is unchanged."""
    if not 0 < width_factor <= 1:
        raise ContractError("width factor must lie in (0, 1]")
    if prior is None or not np.any(np.isfinite(prior)):
        return replace(base, centers=None, rel_halfwidth=0.0)
    rho = (base.d_max - base.d_min) / (base.d_max + base.d_min)
    centers = np.where(np.isfinite(prior) & (prior > 0), prior, np.nan)
    return replace(base, centers=centers, rel_halfwidth=width_factor * rho)


# ---------------------------------------------------------------- one round


@dataclass
class MatchResult:
    depths: list
    confidence: list
    self_focal: float  # focal loss against the network's own hard labels


def _self_focal(P: mvdm.DepthProbabilityVolume, gamma: float) -> float:
    p = P.prob.data.max(axis=0)[P.valid]
    if p.size == 0:
        return 0.0
    p = np.clip(p, 1e-12, 1.0)
    return float(np.mean(-((1 - p) ** gamma) * np.log(p)))


def match_views(views: list, hyps: list, net: mvdm.MatchingNet, gamma: float = 2.0,
                executor=None) -> MatchResult:
    """Depth and confidence for every view, each matched against all others."""
    with T.no_tape():
        pyramids = _map(executor, lambda v: mvdm.extract_features(v.image, net), views)
        intra = _map(executor, lambda p: mvdm.intra_transform(p, net), pyramids)

    def one(i):
        with T.no_tape():
            srcs = [j for j in range(len(views)) if j != i]
            P = mvdm.match_reference(i, srcs, views, hyps[i], net, pyramids, intra)
            d, c = mvdm.depth_estimate(P)
            return d, c, _self_focal(P, gamma)

    out = _map(executor, one, range(len(views)))
    return MatchResult([o[0] for o in out], [o[1] for o in out],
                       float(np.mean([o[2] for o in out])))


def fuse(match: MatchResult, views: list, cfg: Config, executor=None) -> PointCloud:
    fc = mvdm.FusionConfig(p_thresh=cfg.p_thresh, min_views=cfg.fusion_views,
                           min_texture=cfg.texture_thresh)
    return mvdm.fuse_depth_maps(match.depths, match.confidence, views, fc, executor)


def finetune_config(cfg: Config, seed: int | None = None, smooth: bool | None = None) -> pcso.FinetuneConfig:
    return pcso.FinetuneConfig(
        iterations=cfg.finetune_iterations, learning_rate=cfg.finetune_lr,
        decay_factor=cfg.finetune_decay, decay_every=cfg.finetune_decay_every,
        m_surface=cfg.m_surface, m_volume=cfg.m_volume, rho_pitches=cfg.rho_pitches,
        scope=cfg.finetune_scope, smooth=cfg.smooth if smooth is None else smooth,
        smooth_every=cfg.smooth_every, smooth_support=cfg.smooth_support, seed=cfg.seed if seed is None else seed)


def surface_from_cloud(fld: pcso.OccupancyField, cloud, cfg: Config, L_F: float = 0.0,
                       log_sigmas=None, seed: int | None = None):
    """Fine-tune on ``cloud`` and extract the mesh.  Returns ``(result, mesh)``."""
    res = pcso.sign_agnostic_finetune(fld, cloud, finetune_config(cfg, seed), L_F, log_sigmas)
    mesh = pcso.extract(res.field, res.volume, cfg.mise_coarse, cfg.mise_target)
    return res, mesh


def carry_surface(mesh: TriangleMesh, cloud: PointCloud, factor: float, radius: float,
                  seed: int) -> np.ndarray:
    """Samples of the previous mesh lying farther than ``radius`` from the new
    cloud.  They stand in for the surface wherever this round saw nothing, so
    the completion of unseen parts persists across rounds."""
    n = int(factor * len(cloud))
    if mesh.is_empty or n < 1:
        return np.empty((0, 3))
    s = sample_mesh_surface(mesh, n, seed).points
    d, _ = cKDTree(cloud.points).query(s)
    return s[d > radius]


def view_pairs(views: list) -> list:
    """Each view with its nearest other camera."""
    c = np.array([v.pose.center for v in views])
    pairs = []
    for i in range(len(views)):
        d = np.linalg.norm(c - c[i], axis=1)
        d[i] = np.inf
        pairs.append((i, int(np.argmin(d))))
    return pairs


def mesh_metrics(mesh: TriangleMesh, truth: PointCloud, cfg: Config) -> dict:
    if mesh.is_empty:
        return {"CD": float("inf"), "NC": 0.0, "FS": 0.0}
    rep = evaluate(sample_mesh_surface(mesh, cfg.eval_samples, cfg.seed), truth, cfg.fs_tau)
    return {"CD": rep.CD, "NC": rep.NC, "FS": rep.FS}


@dataclass
class PipelineState:
    t: int = 0
    mesh: TriangleMesh = dc_field(default_factory=TriangleMesh.empty)
    priors: list = dc_field(default_factory=list)
    hypotheses: list = dc_field(default_factory=list)
    cloud: PointCloud | None = None
    field: pcso.OccupancyField | None = None
    log_sigmas: list | None = None
    trace: list = dc_field(default_factory=list)
    meshes: list = dc_field(default_factory=list)
    clouds: list = dc_field(default_factory=list)
    finetune_logs: list = dc_field(default_factory=list)


def recon_iterate(views: list, base: DepthHypothesisSet, models: Models, cfg: Config,
                  truth: PointCloud | None = None, T_iter: int | None = None,
                  executor=None) -> PipelineState:
    """Run ``T`` rounds of match -> fuse -> fine-tune -> extract -> feed back.

    The fine-tuned field and the uncertainty weights carry over between
    rounds; from the second round on, the previous mesh's photo-consistency
    score is added to the matching term and samples of the previous mesh away
    from the new cloud join the fine-tuning input (see ``carry_surface``).
    """
    T_iter = cfg.T if T_iter is None else T_iter
    if T_iter < 1:
        raise ContractError("need at least one iteration")
    if len(views) < 2:
        raise ContractError("need at least two views")
    state = PipelineState(hypotheses=[base] * len(views), field=models.field,
                          log_sigmas=None if cfg.log_sigma_init is None else [cfg.log_sigma_init] * 3)
    pairs = view_pairs(views)
    photo_prev = 0.0
    for t in range(1, T_iter + 1):
        match = match_views(views, state.hypotheses, models.matcher, cfg.gamma, executor)
        cloud = fuse(match, views, cfg, executor)
        if len(cloud) < MIN_FUSED_POINTS:
            raise PipelineError(f"iteration {t}: fusion kept only {len(cloud)} points "
                                f"(need {MIN_FUSED_POINTS}); check hypotheses and thresholds")
        L_F = match.self_focal + (photo_prev if t >= 2 else 0.0)
        evidence = cloud
        carried = 0
        if t >= 2 and cfg.carry_factor > 0:
            extra = carry_surface(state.mesh, cloud, cfg.carry_factor,
                                  CARRY_PITCHES * state.field.pitch, cfg.seed + t)
            carried = len(extra)
            evidence = PointCloud(np.concatenate([cloud.points, extra]))
        res, mesh = surface_from_cloud(state.field, evidence, cfg, L_F, state.log_sigmas)
        photo = (mvdm.photo_consistency_loss(mesh, views, pairs, cfg.photo_samples, cfg.seed).item()
                 if not mesh.is_empty else 0.0)
        record = {"t": t, "points": len(cloud), "carried": carried, "faces": int(len(mesh.faces)),
                  "L_F": L_F, "photo": photo}
        last = res.log[-1] if res.log else None
        if last is not None:
            record.update({"L_B": last.L_B, "L_S": last.L_S,
                           "sigma": [float(np.exp(s)) for s in res.log_sigmas]})
        if truth is not None:
            record.update(mesh_metrics(mesh, truth, cfg))
        state.trace.append(record)
        state.t, state.mesh, state.cloud, state.field = t, mesh, cloud, res.field
        state.log_sigmas = res.log_sigmas
        state.meshes.append(mesh)
        state.clouds.append(cloud)
        state.finetune_logs.append(res.log)
        photo_prev = photo
        if t < T_iter and not mesh.is_empty:
            state.priors = render_depth_prior(mesh, views)
            state.hypotheses = [narrow_hypotheses(p, base, cfg.width_factor) for p in state.priors]
        log.info("round %d: %s", t, record)
    return state


# ---------------------------------------------------------------- adaptation


@dataclass
class AdaptationPlan:
    lam: float = 0.1
    epochs: int = 2
    learning_rate: float = 3e-3
    keep_last: int = 2
    target_kinds: tuple = ("box",)
    source_kinds: tuple = ("sphere",)
    scenes_per_epoch: int = 20
    match_scenes: int = 0  # rendered target scenes for the matcher (0: skip it)
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0 or self.epochs < 0:
            raise ContractError("lambda and epochs must be non-negative")
        if self.keep_last < 2:
            raise ContractError("at least the last two layers stay trainable")


def _field_features(fld, pts, q) -> Tensor:
    V = pcso.build_volume(pts, fld)
    return pcso.decoder_hidden(q, pcso.query_feature(V, q), fld)


def adapt_field(fld: pcso.OccupancyField, plan: AdaptationPlan) -> pcso.OccupancyField:
    """Freeze all but the last ``keep_last`` layers, then minimise the target
    occupancy loss plus lambda times the MMD between source- and
    target-domain decoder features."""
    fld = fld.clone()
    fld.freeze_all_but_last(plan.keep_last)
    params = fld.trainable()
    opt = OptimizerState("adam", plan.learning_rate)
    rng = np.random.default_rng(plan.seed)
    sub = np.random.default_rng(plan.seed + 1)
    for ep in range(plan.epochs):
        for k in range(plan.scenes_per_epoch):
            idx = 50000 + ep * plan.scenes_per_epoch + k
            pts_t, q_t, in_t = _occupancy_sample(plan.target_kinds, idx, rng)
            with T.Tape() as tape:
                V = pcso.build_volume(pts_t, fld)
                L = bce_occupancy(T.sigmoid(pcso.field_logits(fld, V, q_t)), in_t.astype(np.float64))
                if plan.lam > 0:
                    pts_s, q_s, _ = _occupancy_sample(plan.source_kinds, idx, rng)
                    a = sub.choice(len(q_s), 256, replace=False)
                    b = sub.choice(len(q_t), 256, replace=False)
                    f_s = _field_features(fld, pts_s, q_s[a])
                    f_t = pcso.decoder_hidden(q_t[b], pcso.query_feature(V, q_t[b]), fld)
                    L = L + mmd(f_s, f_t) * plan.lam
            optimizer_step(opt, params, T.backward(tape, L, params))
    fld.frozen = set()
    return fld


def _volume_features(P: mvdm.DepthProbabilityVolume, n: int, rng) -> Tensor:
    """Per-pixel columns of regulariser logits, subsampled to ``n`` rows."""
    D, H, W = P.logits.shape
    cols = T.reshape(T.transpose(P.logits, (1, 2, 0)), (H * W, D))
    return cols[np.sort(rng.choice(H * W, min(n, H * W), replace=False))]


def adapt_matcher(net: mvdm.MatchingNet, plan: AdaptationPlan, cfg: Config) -> mvdm.MatchingNet:
    """Same recipe for the matcher: focal loss on rendered target scenes plus
    lambda times the MMD of regulariser outputs between domains."""
    net = net.clone()
    net.freeze_all_but_last(plan.keep_last)
    params = net.trainable()
    if plan.match_scenes <= 0 or plan.epochs == 0:
        net.frozen = set()
        return net
    target = training_scenes(plan.target_kinds, plan.match_scenes, 70000, cfg.views)
    source = training_scenes(plan.source_kinds, plan.match_scenes, 80000, cfg.views)
    opt = OptimizerState("adam", plan.learning_rate)
    rng = np.random.default_rng(plan.seed)
    for ep in range(plan.epochs):
        for sc_t, sc_s in zip(target, source):
            n = len(sc_t.views)
            r = int(rng.integers(n))
            with T.Tape() as tape:
                P = mvdm.match_reference(r, [(r + 1) % n, (r - 1) % n], sc_t.views, sc_t.hypotheses, net)
                L = mvdm.focal_loss(P, sc_t.views[r].gt_depth, cfg.gamma)
                if plan.lam > 0:
                    Ps = mvdm.match_reference(r, [(r + 1) % n, (r - 1) % n], sc_s.views,
                                              sc_s.hypotheses, net)
                    L = L + mmd(_volume_features(Ps, 256, rng), _volume_features(P, 256, rng)) * plan.lam
            optimizer_step(opt, params, T.backward(tape, L, params))
    net.frozen = set()
    return net


def model_adapt(models: Models, plan: AdaptationPlan, cfg: Config | None = None) -> Models:
    """Adapt both modules independently; their layers outside the last
    ``keep_last`` are returned bitwise unchanged."""
    cfg = cfg or Config()
    return Models(adapt_matcher(models.matcher, plan, cfg), adapt_field(models.field, plan))


def frozen_names(module: Module, keep_last: int = 2) -> list:
    return [n for _, names in module.layers[:-keep_last] for n in names]
