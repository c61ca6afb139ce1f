"""Occupancy grids, coarse-to-fine extraction and marching cubes.

Grids are lattices over the unit cube: ``resolution`` cells per axis, hence
``resolution + 1`` samples per axis, sample ``(i, j, k)`` sitting at
``(i, j, k) / resolution``.  A sample is *inside* when its value exceeds the
isovalue.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from . import tensor as T
from .geometry import PointCloud, TriangleMesh
from .tensor import ContractError, DomainError, Tensor

Field = Callable[[np.ndarray], np.ndarray]


@dataclass
class OccupancyGrid:
    resolution: int
    values: np.ndarray
    isovalue: float = 0.5
    evaluated: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.resolution < 2:
            raise ContractError("grid resolution must be at least 2")
        n = self.resolution + 1
        if self.values.shape != (n, n, n):
            raise ContractError(f"expected {(n, n, n)} samples, got {self.values.shape}")

    @property
    def pitch(self) -> float:
        return 1.0 / self.resolution


def lattice_points(res: int) -> np.ndarray:
    ax = np.arange(res + 1) / res
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)


def evaluate_grid(field_fn: Field, res: int, isovalue: float = 0.5) -> OccupancyGrid:
    """Evaluate ``field_fn`` at every lattice sample."""
    if res < 2:
        raise ContractError("grid resolution must be at least 2")
    vals = np.asarray(field_fn(lattice_points(res)), dtype=np.float64).reshape((res + 1,) * 3)
    return OccupancyGrid(res, vals, isovalue, np.ones_like(vals, dtype=bool))


def _active_cells(vals: np.ndarray, tau: float) -> np.ndarray:
    inside = vals > tau
    c = [inside[i:i + inside.shape[0] - 1, j:j + inside.shape[1] - 1, k:k + inside.shape[2] - 1]
         for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    any_in = np.logical_or.reduce(c)
    all_in = np.logical_and.reduce(c)
    return any_in & ~all_in


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    n = mask.shape
    for axis in range(3):
        shifted = np.zeros_like(out)
        sl_dst = [slice(None)] * 3
        sl_src = [slice(None)] * 3
        sl_dst[axis], sl_src[axis] = slice(1, n[axis]), slice(0, n[axis] - 1)
        shifted[tuple(sl_dst)] |= out[tuple(sl_src)]
        sl_dst[axis], sl_src[axis] = slice(0, n[axis] - 1), slice(1, n[axis])
        shifted[tuple(sl_dst)] |= out[tuple(sl_src)]
        out |= shifted
    return out


def mise(field_fn: Field, coarse_res: int, target_res: int, isovalue: float = 0.5) -> OccupancyGrid:
    """Multiresolution isosurface extraction grid.

    Evaluates the coarse lattice, then repeatedly subdivides cells whose
    corners straddle the isovalue (plus a one-cell halo).  Samples never
    evaluated are filled by trilinear interpolation inside cells whose corners
    all lie on one side, so they keep that side.
    """
    ratio = target_res // coarse_res
    if coarse_res < 2 or ratio * coarse_res != target_res or ratio & (ratio - 1):
        raise ContractError("target_res must be coarse_res * 2**k")
    if ratio == 1:
        return evaluate_grid(field_fn, coarse_res, isovalue)
    n = target_res + 1
    vals = np.full((n, n, n), np.nan)
    known = np.zeros((n, n, n), dtype=bool)
    s = ratio
    coarse = evaluate_grid(field_fn, coarse_res, isovalue)
    vals[::s, ::s, ::s] = coarse.values
    known[::s, ::s, ::s] = True
    while s > 1:
        h = s // 2
        level = vals[::s, ::s, ::s]
        cells = _dilate(_active_cells(level, isovalue))
        # half-step lattice of the next level
        m = level.shape[0] * 2 - 1
        need = np.zeros((m, m, m), dtype=bool)
        ci = np.nonzero(cells)
        for di in (0, 1, 2):
            for dj in (0, 1, 2):
                for dk in (0, 1, 2):
                    need[2 * ci[0] + di, 2 * ci[1] + dj, 2 * ci[2] + dk] = True
        sub_known = known[::h, ::h, ::h]
        todo = need & ~sub_known
        idx = np.argwhere(todo)
        if len(idx):
            new_vals = np.asarray(field_fn(idx * h / target_res), dtype=np.float64)
            sub = vals[::h, ::h, ::h]
            sub[todo] = new_vals
            vals[::h, ::h, ::h] = sub
            sk = known[::h, ::h, ::h]
            sk[todo] = True
            known[::h, ::h, ::h] = sk
        # fill the rest of the next level from this level's cells
        sub = vals[::h, ::h, ::h]
        missing = np.isnan(sub)
        if missing.any():
            pos = np.argwhere(missing)
            base = np.minimum(pos // 2, level.shape[0] - 2)
            f = (pos - 2 * base) / 2.0
            acc = np.zeros(len(pos))
            for corner in range(8):
                d = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
                w = np.prod(np.where(d == 1, f, 1.0 - f), axis=1)
                cidx = base + d
                acc += w * level[cidx[:, 0], cidx[:, 1], cidx[:, 2]]
            sub[missing] = acc
            vals[::h, ::h, ::h] = sub
        s = h
    return OccupancyGrid(target_res, vals, isovalue, known)


# ---------------------------------------------------------------- marching cubes

CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])
EDGES = [(a, b) for a in range(8) for b in range(8)
         if a < b and np.abs(CORNERS[a] - CORNERS[b]).sum() == 1]
EDGE_AXIS = np.array([int(np.argmax(CORNERS[b] - CORNERS[a])) for a, b in EDGES])
EDGE_ORIGIN = np.array([CORNERS[a] for a, _ in EDGES])
EDGE_INDEX = {e: i for i, e in enumerate(EDGES)}


def _face_corners(axis: int, side: int) -> list[int]:
    """Corners of a cube face in cyclic order."""
    u, v = [a for a in range(3) if a != axis]
    cyc = [(0, 0), (1, 0), (1, 1), (0, 1)]
    out = []
    for cu, cv in cyc:
        bits = [0, 0, 0]
        bits[axis], bits[u], bits[v] = side, cu, cv
        out.append(bits[0] | bits[1] << 1 | bits[2] << 2)
    return out


FACES = [(axis, side, _face_corners(axis, side)) for axis in range(3) for side in (0, 1)]


def _edge_of(a: int, b: int) -> int:
    return EDGE_INDEX[(min(a, b), max(a, b))]


@lru_cache(maxsize=None)
def cell_loops(case: int, decisions: int) -> tuple:
    """Closed iso-curves (as loops of local edge ids) for one cube configuration.

    ``case`` has bit ``c`` set when corner ``c`` is inside.  Bit ``f`` of
    ``decisions`` says whether the inside corners of ambiguous face ``f`` are
    joined across the face.  Iso-curves are traced on each face so that the
    inside region lies to their left seen from outside the cube; chaining them
    gives closed loops.
    """
    inside = [(case >> c) & 1 for c in range(8)]
    mid = {i: (CORNERS[a] + CORNERS[b]) / 2.0 for i, (a, b) in enumerate(EDGES)}
    nxt: dict[int, int] = {}
    for f, (axis, side, cyc) in enumerate(FACES):
        normal = np.zeros(3)
        normal[axis] = 1.0 if side else -1.0
        crossing = [k for k in range(4) if inside[cyc[k]] != inside[cyc[(k + 1) % 4]]]
        if not crossing:
            continue
        segs = []  # (edge_a, edge_b, corner cut off, corner is inside)
        if len(crossing) == 2:
            k0, k1 = crossing
            ea = _edge_of(cyc[k0], cyc[(k0 + 1) % 4])
            eb = _edge_of(cyc[k1], cyc[(k1 + 1) % 4])
            ref = cyc[(k0 + 1) % 4]
            segs.append((ea, eb, ref, inside[ref]))
        else:
            joined = (decisions >> f) & 1
            for k in range(4):
                corner = cyc[k]
                # cut off isolated corners: the outside ones when insides join
                if inside[corner] == (0 if joined else 1):
                    ea = _edge_of(cyc[(k - 1) % 4], corner)
                    eb = _edge_of(corner, cyc[(k + 1) % 4])
                    segs.append((ea, eb, corner, inside[corner]))
        for ea, eb, ref, ref_in in segs:
            A, B, C = mid[ea], mid[eb], CORNERS[ref].astype(float)
            left = np.dot(np.cross(B - A, C - A), normal) > 0
            if left != bool(ref_in):
                ea, eb = eb, ea
            nxt[ea] = eb
    loops = []
    seen: set[int] = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        e = nxt[start]
        while e != start:
            loop.append(e)
            seen.add(e)
            e = nxt[e]
        loops.append(tuple(loop))
    return tuple(loops)


EDGE_FACES = [frozenset(f for f, (_, _, cyc) in enumerate(FACES)
                        for k in range(4) if _edge_of(cyc[k], cyc[(k + 1) % 4]) == e)
              for e in range(12)]


def _chord_cost(a: int, b: int) -> int:
    # a chord between two vertices on one cube face would be shared with the
    # neighbouring cell's triangulation
    return 1 if EDGE_FACES[a] & EDGE_FACES[b] else 0


def triangulate_loop(loop: tuple) -> tuple:
    """Polygon triangulation of ``loop`` minimising chords that lie on a cube face.

    The choice of diagonals does not depend on where the loop starts or which
    way it runs, so inside/outside relabelling only flips the winding.
    """
    variants = [loop[i:] + loop[:i] for i in range(len(loop))]
    rev = loop[::-1]
    variants += [rev[i:] + rev[:i] for i in range(len(loop))]
    canon = min(variants)
    cost, tris = _triangulate(canon)
    if canon in variants[len(loop):]:
        tris = tuple((a, c, b) for a, b, c in tris)
    return cost, tris


@lru_cache(maxsize=None)
def _triangulate(loop: tuple) -> tuple:
    n = len(loop)
    best: dict = {}

    def solve(i, j):
        # triangulate the sub-polygon loop[i..j]
        if j - i < 2:
            return 0, ()
        if (i, j) in best:
            return best[(i, j)]
        out = None
        for k in range(i + 1, j):
            c1, t1 = solve(i, k)
            c2, t2 = solve(k, j)
            c = c1 + c2
            c += _chord_cost(loop[i], loop[k]) if k - i > 1 else 0
            c += _chord_cost(loop[k], loop[j]) if j - k > 1 else 0
            if out is None or c < out[0]:
                out = (c, t1 + t2 + ((loop[i], loop[j], loop[k]),))
        best[(i, j)] = out
        return out

    return solve(0, n - 1)


@lru_cache(maxsize=None)
def cell_triangles(case: int, decisions: int) -> tuple:
    """Triangles and extra vertices for one configuration.

    Returns ``(triangles, centres)``.  Triangle entries are local edge ids, or
    ``12 + c`` for the centroid of loop ``centres[c]``; a centroid is added
    only when a loop cannot be triangulated without a chord on a cube face.
    """
    tris, centres = [], []
    for loop in cell_loops(case, decisions):
        cost, tri = triangulate_loop(loop)
        if cost == 0:
            tris += tri
            continue
        c = 12 + len(centres)
        centres.append(loop)
        tris += [(c, loop[(i + 1) % len(loop)], loop[i]) for i in range(len(loop))]
    return tuple(tris), tuple(centres)


def _face_decisions(cv: np.ndarray, tau: float) -> np.ndarray:
    """Asymptotic decider per face for corner values ``cv`` of shape (n, 8)."""
    bits = np.zeros(len(cv), dtype=np.int64)
    for f, (_, _, cyc) in enumerate(FACES):
        a, b, c, d = (cv[:, k] for k in cyc)
        ia, ib, ic, id_ = (x > tau for x in (a, b, c, d))
        ambiguous = (ia == ic) & (ib == id_) & (ia != ib)
        if not ambiguous.any():
            continue
        den = a + c - b - d
        with np.errstate(divide="ignore", invalid="ignore"):
            saddle = np.where(den != 0, (a * c - b * d) / np.where(den != 0, den, 1.0),
                              (a + b + c + d) / 4.0)
        bits |= (ambiguous & (saddle > tau)).astype(np.int64) << f
    return bits


def marching_cubes(grid: OccupancyGrid) -> TriangleMesh:
    """Triangulate the isosurface of ``grid``.

    Vertices are deduplicated by lattice edge, numbered in order of first use
    with cells visited lexicographically.
    """
    vals, tau, res = grid.values, grid.isovalue, grid.resolution
    active = _active_cells(vals, tau)
    cells = np.argwhere(active)
    if len(cells) == 0:
        return TriangleMesh.empty()
    cv = np.stack([vals[cells[:, 0] + o[0], cells[:, 1] + o[1], cells[:, 2] + o[2]]
                   for o in CORNERS], axis=1)
    case = ((cv > tau).astype(np.int64) << np.arange(8)).sum(axis=1)
    key = case * 64 + _face_decisions(cv, tau)
    n = res + 1
    # global edge id = lattice index of the edge origin * 3 + axis; loop
    # centroids are numbered after every possible edge id
    origin = cells[:, None, :] + EDGE_ORIGIN[None, :, :]
    gedge = ((origin[..., 0] * n + origin[..., 1]) * n + origin[..., 2]) * 3 + EDGE_AXIS[None, :]
    cell_lin = (cells[:, 0] * n + cells[:, 1]) * n + cells[:, 2]
    gcentre = 3 * n ** 3 + cell_lin[:, None] * 4 + np.arange(4)[None, :]
    gid = np.concatenate([gedge, gcentre], axis=1)
    face_cell, face_order, face_edges = [], [], []
    centre_ids, centre_loops = [], []
    for k in np.unique(key):
        tris, centres = cell_triangles(int(k // 64), int(k % 64))
        if not tris:
            continue
        sel = np.nonzero(key == k)[0]
        tri = np.asarray(tris)
        face_cell.append(np.repeat(sel, len(tris)))
        face_order.append(np.tile(np.arange(len(tris)), len(sel)))
        face_edges.append(gid[sel][:, tri].reshape(-1, 3))
        for c, loop in enumerate(centres):
            centre_ids.append(gcentre[sel, c])
            centre_loops.append(gedge[sel][:, list(loop)])
    fc, fo, fe = (np.concatenate(x) for x in (face_cell, face_order, face_edges))
    order = np.lexsort((fo, fc))
    fe = fe[order]
    flat = fe.reshape(-1)
    uniq, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    faces = rank[inverse].reshape(-1, 3)
    ids = uniq[np.argsort(first, kind="stable")]

    def edge_points(edge_ids):
        axis = edge_ids % 3
        lin = edge_ids // 3
        p0 = np.stack([lin // (n * n), (lin // n) % n, lin % n], axis=-1)
        p1 = p0.copy()
        np.put_along_axis(p1, axis[..., None], np.take_along_axis(p0, axis[..., None], -1) + 1, -1)
        v0 = vals[p0[..., 0], p0[..., 1], p0[..., 2]]
        v1 = vals[p1[..., 0], p1[..., 1], p1[..., 2]]
        t = (tau - v0) / (v1 - v0)
        pts = p0.astype(np.float64)
        np.put_along_axis(pts, axis[..., None], np.take_along_axis(pts, axis[..., None], -1) + t[..., None], -1)
        return pts

    verts = np.empty((len(ids), 3))
    is_edge = ids < 3 * n ** 3
    verts[is_edge] = edge_points(ids[is_edge])
    if centre_ids:
        where = {int(g): i for i, g in enumerate(ids) if g >= 3 * n ** 3}
        for cid, loops in zip(centre_ids, centre_loops):
            pos = edge_points(loops).mean(axis=1)
            for g, p in zip(cid, pos):
                verts[where[int(g)]] = p
    return TriangleMesh(verts / res, faces)


def extract_mesh(field_fn: Field, coarse_res: int = 16, target_res: int = 64,
                 isovalue: float = 0.5) -> TriangleMesh:
    return marching_cubes(mise(field_fn, coarse_res, target_res, isovalue))


# ---------------------------------------------------------------- curvature


@dataclass
class VertexCurvature:
    H: np.ndarray
    K_G: np.ndarray
    area: np.ndarray
    boundary: np.ndarray
    angle_defect: np.ndarray


def _incidence(faces: np.ndarray, n_vertices: int):
    import scipy.sparse as sp

    m = len(faces)
    rows = faces.T.reshape(-1)
    cols = np.arange(3 * m)
    return sp.csr_matrix((np.ones(3 * m), (rows, cols)), shape=(n_vertices, 3 * m))


def boundary_vertices(mesh: TriangleMesh) -> np.ndarray:
    e = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    keys, counts = np.unique(e, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise ContractError("non-manifold edge: more than two incident faces")
    flag = np.zeros(len(mesh.vertices), dtype=bool)
    flag[keys[counts == 1].reshape(-1)] = True
    return flag


def curvature_terms(vertices, faces: np.ndarray):
    """Per-vertex Laplacian vector, mixed area and angle sum as tensors.

    The Laplacian is ``sum_j (cot a + cot b)(x_i - x_j)``, so the mean
    curvature normal is ``lap / (2 * area)``.
    """
    V = T.as_tensor(vertices)
    n = V.shape[0]
    a, b, c = V[faces[:, 0]], V[faces[:, 1]], V[faces[:, 2]]
    corners = [(a, b, c), (b, c, a), (c, a, b)]
    cr = T.cross(b - a, c - a)
    dbl_area = T.sqrt((cr * cr).sum(axis=1))
    area = dbl_area * 0.5
    dots, cots, angles = [], [], []
    for p, q, r in corners:
        d = ((q - p) * (r - p)).sum(axis=1)
        dots.append(d.data)
        cots.append(d / dbl_area)
        angles.append(T.atan2(dbl_area, d))
    # cot at corner k weighs the opposite edge (k+1, k+2)
    lap_parts = []
    for k in range(3):
        _, q, r = corners[k]
        w = T.reshape(cots[k], (-1, 1))
        lap_parts.append((w * (q - r), w * (r - q)))
    inc = _incidence(faces, n)
    # order matches the incidence columns: corner 0 rows, then 1, then 2
    lap_at = [lap_parts[1][1] + lap_parts[2][0],   # vertex a: opposite-b edge gives (a-c), opposite-c gives (a-b)
              lap_parts[2][1] + lap_parts[0][0],
              lap_parts[0][1] + lap_parts[1][0]]
    lap = T.linear_map(inc, T.concat(lap_at, axis=0))
    obtuse = np.stack([d < 0 for d in dots], axis=1)
    any_obtuse = obtuse.any(axis=1)
    area_at = []
    for k in range(3):
        p, q, r = corners[k]
        j, l = (k + 1) % 3, (k + 2) % 3
        vor = (((r - p) * (r - p)).sum(axis=1) * cots[j]
               + ((q - p) * (q - p)).sum(axis=1) * cots[l]) * 0.125
        here = obtuse[:, k]
        part = T.where(~any_obtuse, vor, T.where(here, area * 0.5, area * 0.25))
        area_at.append(part)
    mixed = T.linear_map(inc, T.concat(area_at, axis=0))
    angle_sum = T.linear_map(inc, T.concat(angles, axis=0))
    return lap, mixed, angle_sum


def mesh_curvature(mesh: TriangleMesh) -> VertexCurvature:
    """Cotangent mean curvature, angle-defect Gaussian curvature, mixed areas.

    ``H`` is positive where the surface bends away from its outward normal
    (a sphere with outward faces has ``H = 1 / r``).
    """
    boundary = boundary_vertices(mesh)
    lap, area, angle_sum = (x.data for x in curvature_terms(mesh.vertices, mesh.faces))
    safe = np.where(area > 0, area, 1.0)
    hn = lap / (2 * safe[:, None])
    sign = np.sign(np.sum(hn * mesh.vertex_normals(), axis=1))
    H = 0.5 * np.linalg.norm(hn, axis=1) * np.where(sign == 0, 1.0, sign)
    defect = 2 * np.pi - angle_sum
    K = defect / safe
    return VertexCurvature(H, K, area, boundary, defect)


def sample_mesh_surface(mesh: TriangleMesh, n: int, seed: int) -> PointCloud:
    """Area-uniform samples with face normals."""
    if mesh.is_empty:
        raise DomainError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.uniform(size=n), rng.uniform(size=n)
    s = np.sqrt(r1)
    u, v, w = 1 - s, s * (1 - r2), s * r2
    tri = mesh.vertices[mesh.faces[face]]
    pts = u[:, None] * tri[:, 0] + v[:, None] * tri[:, 1] + w[:, None] * tri[:, 2]
    return PointCloud(pts, mesh.face_normals()[face])
