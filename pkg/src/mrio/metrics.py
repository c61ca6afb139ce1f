"""Point-cloud and surface reconstruction metrics.

Chamfer distance uses squared nearest-neighbour distances while accuracy and
completeness use unsquared ones.  Acc/Comp apply no outlier truncation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, TriangleMesh
from .tensor import ContractError, DomainError


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


class NearestNeighborIndex:
    """Exact nearest neighbours over a fixed point set.

    Backed by a median-split k-d tree (leaf size 16); candidate neighbours are
    re-ranked with the exact squared distance, ties going to the lowest id.
    """

    def __init__(self, points: np.ndarray, leafsize: int = 16):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise DomainError("cannot index an empty point set")
        self._tree = cKDTree(self.points, leafsize=leafsize, balanced_tree=True)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries: np.ndarray, k_candidates: int = 4):
        """Return ``(ids, squared_distances)`` for each query row."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(k_candidates, len(self.points))
        _, cand = self._tree.query(q, k=k)
        cand = np.asarray(cand).reshape(len(q), k)
        d2 = _sqdist(self.points[cand], q[:, None, :])
        best = d2.min(axis=1, keepdims=True)
        # lowest id among exact ties
        ids = np.where(d2 == best, cand, np.iinfo(np.int64).max).min(axis=1)
        d2_best = best[:, 0]
        # a tie may hide outside the candidate list: resolve against all points at that radius
        tied = np.count_nonzero(d2 == best, axis=1) == k
        for i in np.nonzero(tied & (k < len(self.points)))[0]:
            allc = np.asarray(self._tree.query_ball_point(q[i], np.sqrt(d2_best[i]) * (1 + 1e-12) + 1e-300))
            dd = _sqdist(self.points[allc], q[i])
            m = dd.min()
            ids[i] = allc[dd == m].min()
            d2_best[i] = m
        return ids, d2_best


def nn_query(index: NearestNeighborIndex, q) -> tuple[int, float]:
    ids, d2 = index.query(np.asarray(q, dtype=np.float64).reshape(1, 3))
    return int(ids[0]), float(np.sqrt(d2[0]))


def _points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise DomainError("metric on an empty point set")
    return pts


def _nn_sq(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return NearestNeighborIndex(dst).query(src)


def chamfer(P, T) -> float:
    p, t = _points(P), _points(T)
    return float(_nn_sq(p, t)[1].mean() + _nn_sq(t, p)[1].mean())


def accuracy(P, T) -> float:
    p, t = _points(P), _points(T)
    return float(np.sqrt(_nn_sq(p, t)[1]).mean())


def completeness(P, T) -> float:
    p, t = _points(P), _points(T)
    return float(np.sqrt(_nn_sq(t, p)[1]).mean())


def overall(acc: float, comp: float) -> float:
    return (acc + comp) / 2


def normal_consistency(P: PointCloud, T: PointCloud) -> float:
    if P.normals is None or T.normals is None:
        raise ContractError("normal consistency needs normals on both clouds")
    ids, _ = _nn_sq(_points(P), _points(T))
    dots = np.abs(np.sum(P.normals * T.normals[ids], axis=1))
    return float(np.clip(dots, 0.0, 1.0).mean())


def fscore(P, T, tau: float = 0.01) -> float:
    """Harmonic mean of precision and recall at distance ``tau``, in percent."""
    if not tau > 0:
        raise ContractError("threshold must be positive")
    p, t = _points(P), _points(T)
    precision = float(np.mean(_nn_sq(p, t)[1] <= tau * tau))
    recall = float(np.mean(_nn_sq(t, p)[1] <= tau * tau))
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


@dataclass
class MetricsReport:
    CD: float
    NC: float
    FS: float
    Acc: float
    Comp: float
    Overall: float

    COLUMNS = ("Acc", "Comp", "Overall", "CD", "NC", "FS")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def table(self) -> str:
        head = "".join(f"{c:>12}" for c in self.COLUMNS)
        row = "".join(f"{getattr(self, c):>12.6f}" for c in self.COLUMNS)
        return head + "\n" + row


def evaluate(P: PointCloud, T: PointCloud, tau: float = 0.01) -> MetricsReport:
    """Full metric suite between a reconstruction ``P`` and ground truth ``T``."""
    p, t = _points(P), _points(T)
    ids_pt, d2_pt = _nn_sq(p, t)
    ids_tp, d2_tp = _nn_sq(t, p)
    cd = float(d2_pt.mean() + d2_tp.mean())
    acc = float(np.sqrt(d2_pt).mean())
    comp = float(np.sqrt(d2_tp).mean())
    if P.normals is not None and T.normals is not None:
        nc = float(np.clip(np.abs(np.sum(P.normals * T.normals[ids_pt], axis=1)), 0, 1).mean())
    else:
        nc = float("nan")
    prec = float(np.mean(d2_pt <= tau * tau))
    rec = float(np.mean(d2_tp <= tau * tau))
    fs = 0.0 if prec + rec == 0 else 100.0 * 2 * prec * rec / (prec + rec)
    return MetricsReport(cd, nc, fs, acc, comp, overall(acc, comp))


def evaluate_meshes(pred: TriangleMesh, gt: TriangleMesh, n: int = 100_000, seed: int = 0,
                    tau: float = 0.01) -> MetricsReport:
    from .isosurface import sample_mesh_surface

    return evaluate(sample_mesh_surface(pred, n, seed), sample_mesh_surface(gt, n, seed + 1), tau)
