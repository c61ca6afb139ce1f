"""ASCII PLY / OBJ for meshes and clouds, PFM for float rasters.

Floats are written with ``repr`` so a write/read round trip is exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import PointCloud, TriangleMesh


class FormatError(ValueError):
    pass


def _fmt(row) -> str:
    return " ".join(repr(float(v)) for v in row)


# ---------------------------------------------------------------- PLY


def write_ply(path, vertices: np.ndarray, faces: np.ndarray | None = None,
              normals: np.ndarray | None = None) -> None:
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(vertices)):
        raise FormatError("refusing to write non-finite coordinates")
    lines = ["ply", "format ascii 1.0", f"element vertex {len(vertices)}",
             "property double x", "property double y", "property double z"]
    if normals is not None:
        lines += ["property double nx", "property double ny", "property double nz"]
        cols = np.hstack([vertices, np.asarray(normals, dtype=np.float64).reshape(-1, 3)])
    else:
        cols = vertices
    n_faces = 0 if faces is None else len(faces)
    if faces is not None:
        lines += [f"element face {n_faces}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    lines += [_fmt(r) for r in cols]
    if faces is not None:
        lines += ["3 " + " ".join(str(int(i)) for i in f) for f in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Return ``(vertices, normals or None, faces)`` from an ASCII PLY."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    elements: list[list] = []  # [name, count, [props]]
    i = 1
    while True:
        if i >= len(text):
            raise FormatError(f"{path}: header has no end_header")
        tok = text[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise FormatError(f"{path}: only ASCII PLY is supported")
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise FormatError(f"{path}: property before element")
            elements[-1][2].append(tok[-1] if tok[1] != "list" else ("list", tok[-1]))
        elif tok[0] == "end_header":
            break
    verts = np.zeros((0, 3))
    normals = None
    faces = np.zeros((0, 3), dtype=np.int64)
    body = [ln.split() for ln in text[i:] if ln.strip()]
    pos = 0
    for name, count, props in elements:
        rows = body[pos:pos + count]
        if len(rows) < count:
            raise FormatError(f"{path}: truncated {name} block")
        pos += count
        if name == "vertex":
            try:
                data = np.array([[float(v) for v in r[:len(props)]] for r in rows]).reshape(count, len(props))
            except ValueError as exc:
                raise FormatError(f"{path}: bad vertex row ({exc})") from exc
            col = {p: k for k, p in enumerate(props)}
            verts = data[:, [col["x"], col["y"], col["z"]]]
            if all(k in col for k in ("nx", "ny", "nz")):
                normals = data[:, [col["nx"], col["ny"], col["nz"]]]
        elif name == "face":
            tris = []
            for r in rows:
                n = int(r[0])
                idx = [int(v) for v in r[1:1 + n]]
                tris += [[idx[0], idx[k], idx[k + 1]] for k in range(1, n - 1)]
            faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return verts, normals, faces


# ---------------------------------------------------------------- OBJ


def write_obj(path, mesh: TriangleMesh, normals: bool = True) -> None:
    lines = ["v " + _fmt(v) for v in mesh.vertices]
    if normals:
        lines += ["vn " + _fmt(n) for n in mesh.vertex_normals()]
        lines += ["f " + " ".join(f"{i + 1}//{i + 1}" for i in f) for f in mesh.faces]
    else:
        lines += ["f " + " ".join(str(i + 1) for i in f) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for ln_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        try:
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = []
                for t in tok[1:]:
                    k = int(t.split("/")[0])
                    idx.append(k - 1 if k > 0 else len(verts) + k)
                faces += [[idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1)]
        except ValueError as exc:
            raise FormatError(f"{path}:{ln_no}: {exc}") from exc
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


# ---------------------------------------------------------------- dispatch


def save_mesh(path, mesh: TriangleMesh) -> None:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        write_obj(path, mesh)
    else:
        write_ply(path, mesh.vertices, mesh.faces)


def load_geometry(path) -> TriangleMesh | PointCloud:
    """A mesh if the file has faces, otherwise a point cloud."""
    path = Path(path)
    if path.suffix.lower() == ".obj":
        mesh = read_obj(path)
        return mesh if len(mesh.faces) else PointCloud(mesh.vertices)
    v, n, f = read_ply(path)
    if len(f):
        return TriangleMesh(v, f)
    return PointCloud(v, n)


def save_cloud(path, cloud: PointCloud) -> None:
    write_ply(path, cloud.points, normals=cloud.normals)


# ---------------------------------------------------------------- PFM


def write_pfm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float32)
    color = img.ndim == 3 and img.shape[2] == 3
    if img.ndim == 3 and not color:
        if img.shape[2] != 1:
            raise FormatError("PFM holds 1 or 3 channels")
        img = img[..., 0]
    h, w = img.shape[:2]
    header = f"{'PF' if color else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.flipud(img).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise FormatError(f"{path}: not a PFM file")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        c = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h * c:
        raise FormatError(f"{path}: expected {w * h * c} samples, found {data.size}")
    shape = (h, w, 3) if c == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float64)
