"""``mrio`` command line: synth | match | surf | recon | eval | adapt | gradcheck | pretrain.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as mio
from . import mvdm, pcso, pipeline
from . import tensor as T
from .camera import CameraView, DepthHypothesisSet, read_cam, write_cam
from .config import Config, ConfigError, load_config
from .geometry import PointCloud, TriangleMesh
from .isosurface import sample_mesh_surface
from .metrics import evaluate
from .synth import SCENE_KINDS, build_scene, random_scene
from .tensor import ContractError, DomainError

log = logging.getLogger("mrio")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------- scene directories


def write_scene(out: Path, scene, kind: str, seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for sub in ("images", "cams", "depths"):
        (out / sub).mkdir(exist_ok=True)
    hyp = scene.hypotheses
    for k, v in enumerate(scene.views):
        mio.write_pfm(out / "images" / f"{k:08d}.pfm", v.image)
        write_cam(out / "cams" / f"{k:08d}_cam.txt", v, hyp)
        if v.gt_depth is not None:
            mio.write_pfm(out / "depths" / f"{k:08d}.pfm", v.gt_depth)
    meta = {"kind": kind, "seed": seed, "views": len(scene.views),
            "width": scene.spec.width, "height": scene.spec.height,
            "hypotheses": {"d_min": hyp.d_min, "d_max": hyp.d_max, "count": hyp.count,
                           "spacing": hyp.spacing}}
    (out / "scene.json").write_text(json.dumps(meta, indent=1) + "\n")
    mio.save_cloud(out / "gt.ply", scene.truth.surface)


def read_scene(path: Path):
    """Views, base hypothesis set, ground-truth cloud (or None), metadata."""
    path = Path(path)
    meta_file = path / "scene.json"
    if not meta_file.exists():
        raise FileNotFoundError(f"{meta_file} not found")
    meta = json.loads(meta_file.read_text())
    views = []
    for k in range(int(meta["views"])):
        img = mio.read_pfm(path / "images" / f"{k:08d}.pfm")
        K, pose, _ = read_cam(path / "cams" / f"{k:08d}_cam.txt", img.shape[1], img.shape[0])
        dpath = path / "depths" / f"{k:08d}.pfm"
        gt = mio.read_pfm(dpath) if dpath.exists() else None
        views.append(CameraView(K, pose, img, gt))
    h = meta["hypotheses"]
    base = DepthHypothesisSet(float(h["d_min"]), float(h["d_max"]), int(h["count"]), h["spacing"])
    truth = None
    if (path / "gt.ply").exists():
        g = mio.load_geometry(path / "gt.ply")
        truth = g if isinstance(g, PointCloud) else sample_mesh_surface(g, 20000, 0)
    return views, base, truth, meta


# ---------------------------------------------------------------- helpers


def _config(args) -> Config:
    cfg = load_config(args.config)
    return cfg


def _models(args, cfg: Config) -> pipeline.Models:
    if getattr(args, "checkpoint", None):
        return pipeline.load_models(args.checkpoint, cfg)
    return pipeline.default_models(cfg)


def _out(args, cfg: Config) -> Path:
    out = Path(args.out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.echo())
    return out


def _write_jsonl(path: Path, rows) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    cfg = _config(args)
    spec = random_scene(args.kind, cfg.seed, n_views=cfg.views, hypotheses=cfg.hypotheses)
    scene = build_scene(spec)
    write_scene(Path(args.out), scene, args.kind, cfg.seed)
    print(f"wrote {len(scene.views)} views to {args.out}")
    return 0


def cmd_match(args) -> int:
    cfg = _config(args)
    views, base, _, _ = read_scene(args.scene)
    models = _models(args, cfg)
    out = _out(args, cfg)
    with pipeline.worker_pool(args.threads) as ex:
        match = pipeline.match_views(views, [base] * len(views), models.matcher, cfg.gamma, ex)
        cloud = pipeline.fuse(match, views, cfg, ex)
    for sub in ("depths", "probs"):
        (out / sub).mkdir(exist_ok=True)
    for k, (d, c) in enumerate(zip(match.depths, match.confidence)):
        mio.write_pfm(out / "depths" / f"{k:08d}.pfm", d)
        mio.write_pfm(out / "probs" / f"{k:08d}.pfm", c)
    mio.save_cloud(out / "fused.ply", cloud)
    print(f"fused {len(cloud)} points -> {out / 'fused.ply'}")
    return 0


def cmd_surf(args) -> int:
    cfg = _config(args)
    geom = mio.load_geometry(args.cloud)
    cloud = geom if isinstance(geom, PointCloud) else PointCloud(geom.vertices)
    models = _models(args, cfg)
    out = _out(args, cfg)
    with pipeline.worker_pool(1):
        res, mesh = pipeline.surface_from_cloud(models.field, cloud, cfg)
    mio.write_obj(out / "mesh.obj", mesh)
    _write_jsonl(out / "finetune_log.jsonl", [json.loads(r.to_json()) for r in res.log])
    print(f"mesh with {len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {out / 'mesh.obj'}")
    return 0


def cmd_recon(args) -> int:
    cfg = _config(args)
    views, base, truth, _ = read_scene(args.scene)
    models = _models(args, cfg)
    out = _out(args, cfg)
    with pipeline.worker_pool(args.threads) as ex:
        state = pipeline.recon_iterate(views, base, models, cfg, truth, args.T, ex)
    for t, (mesh, cloud) in enumerate(zip(state.meshes, state.clouds), 1):
        mio.write_obj(out / f"mesh_{t}.obj", mesh)
        mio.save_cloud(out / f"cloud_{t}.ply", cloud)
    _write_jsonl(out / "trace.jsonl", state.trace)
    if truth is not None and not state.mesh.is_empty:
        rep = evaluate(sample_mesh_surface(state.mesh, cfg.eval_samples, cfg.seed), truth, cfg.fs_tau)
        (out / "metrics.json").write_text(rep.to_json() + "\n")
        print(rep.table())
    print(f"{state.t} round(s) -> {out}")
    return 0


def _as_cloud(g, n: int, seed: int) -> PointCloud:
    return g if isinstance(g, PointCloud) else sample_mesh_surface(g, n, seed)


def cmd_eval(args) -> int:
    cfg = _config(args)
    pred = _as_cloud(mio.load_geometry(args.pred), cfg.eval_samples, cfg.seed)
    gt = _as_cloud(mio.load_geometry(args.gt), cfg.eval_samples, cfg.seed)
    rep = evaluate(pred, gt, args.tau if args.tau is not None else cfg.fs_tau)
    print(rep.table())
    print(rep.to_json())
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args)
    _, _, _, meta = read_scene(args.scene)
    kind = meta.get("kind")
    if kind not in SCENE_KINDS:
        raise DomainError(f"scene kind {kind!r} has no procedural generator for adaptation")
    models = _models(args, cfg)
    plan = pipeline.AdaptationPlan(lam=cfg.lam, epochs=cfg.adapt_epochs, learning_rate=cfg.adapt_lr,
                                   target_kinds=(kind,), source_kinds=tuple(args.source),
                                   match_scenes=args.match_scenes, seed=cfg.seed)
    with pipeline.worker_pool(1):
        adapted = pipeline.model_adapt(models, plan, cfg)
    pipeline.save_models(args.out, adapted)
    print(f"adapted checkpoint -> {args.out}")
    return 0


def gradcheck_suite(seed: int = 0) -> list:
    """``(name, max relative error)`` for every differentiable loss and core op."""
    from .camera import CameraIntrinsics, CameraPose, warp_feature_map
    from .gradcheck import finite_diff_check
    from .losses import bce_occupancy, mmd, smooth_loss, uncertainty_total, unsigned_ce
    from .geometry import icosphere
    from .tensor import Tensor

    rng = np.random.default_rng(seed)
    out = []
    D, H, W = 5, 3, 4
    logits = Tensor(rng.normal(size=(D, H, W)), requires_grad=True)
    depths = np.broadcast_to(np.linspace(1, 2, D)[:, None, None], (D, H, W)).copy()
    gt = rng.uniform(1, 2, (H, W))
    for g in (0.0, 1.0, 2.0):
        def f(g=g):
            P = mvdm.DepthProbabilityVolume(logits, T.softmax(logits, 0), depths, np.ones((H, W), bool))
            return mvdm.focal_loss(P, gt, g)
        out.append((f"focal_loss(gamma={g:g})", finite_diff_check(f, [logits])))
    x = Tensor(rng.normal(size=10), requires_grad=True)
    tgt = rng.uniform(size=10)
    out.append(("bce_occupancy", finite_diff_check(lambda: bce_occupancy(T.sigmoid(x), tgt), [x])))
    u = np.where(rng.uniform(size=10) < 0.5, 0.5, 1.0)
    out.append(("unsigned_ce", finite_diff_check(lambda: unsigned_ce(x, u), [x])))
    Ls = Tensor(rng.uniform(0.2, 2, 3), requires_grad=True)
    s = Tensor(rng.normal(size=3) * 0.3, requires_grad=True)
    out.append(("uncertainty_total", finite_diff_check(
        lambda: uncertainty_total(Ls[0], Ls[1], Ls[2], [s[0], s[1], s[2]]).tensor, [Ls, s])))
    a = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(5, 3)) + 0.5, requires_grad=True)
    out.append(("mmd", finite_diff_check(lambda: mmd(a, b, 1.3), [a, b])))
    Q, K, V = (Tensor(rng.normal(size=sh), requires_grad=True) for sh in ((3, 4), (5, 4), (5, 2)))
    wq = rng.normal(size=(3, 2))
    out.append(("attention", finite_diff_check(lambda: (mvdm.attention(Q, K, V) * wq).sum(), [Q, K, V])))
    Kc = CameraIntrinsics(10.0, 10.0, 3.5, 3.5, 8, 8)
    ref = CameraView(Kc, CameraPose(np.eye(3), np.zeros(3)), np.zeros((8, 8, 1)))
    src = CameraView(Kc, CameraPose(np.eye(3), np.array([-0.1, 0.02, 0.0])), np.zeros((8, 8, 1)))
    feat = Tensor(rng.normal(size=(8, 8, 2)), requires_grad=True)
    hyp = DepthHypothesisSet(1.0, 3.0, 3)
    ww = rng.normal(size=(3, 8, 8, 2))
    out.append(("warp_feature_map", finite_diff_check(
        lambda: (warp_feature_map(feat, hyp, ref, src)[0] * ww).sum(), [feat])))
    sph = icosphere(1, 0.7)
    vtx = Tensor(sph.vertices + rng.normal(0, 0.01, sph.vertices.shape), requires_grad=True)
    out.append(("smooth_loss", finite_diff_check(lambda: smooth_loss(vertices=vtx, faces=sph.faces), [vtx])))
    return out


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite()
    ok = True
    for name, err in results:
        good = err < args.tol
        ok &= good
        print(f"{'PASS' if good else 'FAIL'} {name}: max rel err {err:.3e}")
    return 0 if ok else 2


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    models = pipeline.fresh_models(cfg)
    with pipeline.worker_pool(1):
        pipeline.pretrain_field(models.field, cfg)
        pipeline.pretrain_matcher(models.matcher, cfg)
    pipeline.save_models(args.out, models)
    print(f"pre-trained checkpoint -> {args.out}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mrio", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, threads=False, checkpoint=False, out=True):
        sp.add_argument("--config", help="key=value or JSON config file")
        if out:
            sp.add_argument("--out", help="output directory (default: config 'output')")
        if threads:
            sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        if checkpoint:
            sp.add_argument("--checkpoint", help="model checkpoint (default: bundled weights)")

    s = sub.add_parser("synth", help="render a synthetic scene directory")
    s.add_argument("out")
    s.add_argument("--kind", choices=SCENE_KINDS, default="sphere")
    common(s, out=False)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("match", help="depth maps and fused cloud for a scene")
    s.add_argument("scene")
    common(s, threads=True, checkpoint=True)
    s.set_defaults(fn=cmd_match)

    s = sub.add_parser("surf", help="fine-tune the occupancy field on a cloud and extract a mesh")
    s.add_argument("cloud")
    common(s, checkpoint=True)
    s.set_defaults(fn=cmd_surf)

    s = sub.add_parser("recon", help="full recurrent reconstruction")
    s.add_argument("scene")
    s.add_argument("--T", type=int, default=None, help="rounds (default: config T)")
    common(s, threads=True, checkpoint=True)
    s.set_defaults(fn=cmd_recon)

    s = sub.add_parser("eval", help="metrics between two PLY/OBJ files")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("--tau", type=float, default=None)
    common(s, out=False)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("adapt", help="adapt a checkpoint to a target scene's domain")
    s.add_argument("scene")
    s.add_argument("--out", required=True, help="adapted checkpoint path")
    s.add_argument("--source", nargs="+", default=["sphere"], choices=SCENE_KINDS)
    s.add_argument("--match-scenes", type=int, default=0)
    common(s, checkpoint=True, out=False)
    s.set_defaults(fn=cmd_adapt)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("pretrain", help="pre-train both networks on procedural scenes")
    s.add_argument("--out", required=True, help="checkpoint path")
    common(s, out=False)
    s.set_defaults(fn=cmd_pretrain)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        return args.fn(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        # FormatError, CheckpointError, DomainError and ContractError are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
