"""File formats: ASCII PLY clouds, Wavefront OBJ meshes, pose files, CSV."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .geometry import PointCloud, RigidTransform, TriMesh


def write_ply(path, cloud: PointCloud):
    path = Path(path)
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if cloud.has_normals else [])
    data = cloud.points if not cloud.has_normals else np.hstack([cloud.points, cloud.normals])
    with path.open("w") as fh:
        fh.write("ply\nformat ascii 1.0\ncomment units mm\n")
        fh.write(f"element vertex {len(cloud)}\n")
        for p in props:
            fh.write(f"property double {p}\n")
        fh.write("end_header\n")
        for row in data:
            fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def read_ply(path) -> PointCloud:
    with Path(path).open() as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        count = None
        props = []
        in_vertex = False
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported")
            if tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    count = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if count is None:
            raise ValueError(f"{path}: no vertex element")
        rows = [fh.readline().split() for _ in range(count)]
    data = np.array(rows, dtype=float).reshape(count, len(props))
    col = {p: i for i, p in enumerate(props)}
    pts = data[:, [col["x"], col["y"], col["z"]]]
    normals = None
    if all(k in col for k in ("nx", "ny", "nz")):
        normals = data[:, [col["nx"], col["ny"], col["nz"]]]
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals)


def write_obj(path, mesh: TriMesh):
    with Path(path).open("w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    with Path(path).open() as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                # fan-triangulate polygons
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return TriMesh(np.array(verts, dtype=float), np.array(faces, dtype=np.int64))


def write_pose(path, pose: RigidTransform):
    with Path(path).open("w") as fh:
        fh.write("# rigid transform: three rotation rows, then translation (mm)\n")
        for row in pose.rotation:
            fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")
        fh.write(" ".join(f"{x:.17g}" for x in pose.translation) + "\n")


def read_pose(path) -> RigidTransform:
    rows = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append([float(x) for x in line.split()])
    if len(rows) != 4 or any(len(r) != 3 for r in rows):
        raise ValueError(f"{path}: expected 4 rows of 3 numbers")
    return RigidTransform(np.array(rows[:3]), np.array(rows[3]))


def read_heightfield_csv(path):
    """Read a body-surface height field.

    The first row holds the x coordinates (after a leading blank cell), the
    first column the y coordinates, and the body holds z = s(x, y).
    """
    with Path(path).open() as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    xs = np.array([float(v) for v in rows[0][1:]])
    ys = np.array([float(r[0]) for r in rows[1:]])
    zs = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return xs, ys, zs


def write_heightfield_csv(path, xs, ys, zs):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + [f"{x:.17g}" for x in xs])
        for y, row in zip(ys, zs):
            w.writerow([f"{y:.17g}"] + [f"{z:.17g}" for z in row])


def write_csv(path, header, rows, comments=()):
    """Write a CSV with optional leading ``#`` comment lines."""
    with Path(path).open("w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return v


def read_csv(path):
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return list(reader)


def load_cloud(path) -> PointCloud:
    """Load a PLY cloud, or the vertices of an OBJ mesh."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    if path.suffix.lower() == ".obj":
        return PointCloud(read_obj(path).vertices)
    raise ValueError(f"{path}: unsupported extension")
