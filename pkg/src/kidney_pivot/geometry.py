"""Poses, point clouds, meshes and the geometric operations built on them.

Units are millimetres throughout. A :class:`RigidTransform` maps points as
``R @ p + t``; composition ``a @ b`` applies ``b`` first.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .errors import (
    DegenerateCloud,
    DegenerateNeighborhood,
    InvalidCount,
    InvalidReference,
    OpenMesh,
)

# ---------------------------------------------------------------------------
# small rotation helpers


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def rot_x(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle(axis, angle):
    """Rotation matrix about a unit ``axis`` (Rodrigues)."""
    k = skew(unit(axis))
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def project_to_rotation(m):
    """Nearest rotation matrix in the Frobenius sense (polar projection)."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_angle(r):
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(r) - 1.0) / 2.0
    # acos loses precision near 0; use the skew part there
    s = np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    return math.atan2(s, min(max(c, -1.0), 1.0))


def angle_between(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return math.atan2(np.linalg.norm(np.cross(a, b)), float(np.dot(a, b)))


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def apply_vector(self, vectors):
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other):
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def orthonormalized(self):
        return RigidTransform(project_to_rotation(self.rotation), self.translation)

    def is_valid(self, tol=1e-9):
        r = self.rotation
        return (
            bool(np.all(np.isfinite(r)))
            and bool(np.all(np.isfinite(self.translation)))
            and np.max(np.abs(r.T @ r - np.eye(3))) < tol
            and abs(np.linalg.det(r) - 1.0) < tol
        )


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=float).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError("normals and points differ in count")
            if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-9:
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self):
        return self.normals is not None

    def centroid(self):
        return self.points.mean(axis=0)

    def transformed(self, t: RigidTransform):
        normals = None if self.normals is None else t.apply_vector(self.normals)
        return PointCloud(t.apply(self.points), normals)

    def subset(self, index):
        normals = None if self.normals is None else self.normals[index]
        return PointCloud(self.points[index], normals)


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def is_closed(self):
        """True when every undirected edge is shared by exactly two faces."""
        if len(self.faces) == 0:
            return False
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def transformed(self, t: RigidTransform):
        return TriMesh(t.apply(self.vertices), self.faces)

    def signed_volume(self):
        tri = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass(frozen=True)
class FanSpec:
    """Field of view of a curvilinear probe.

    The image is an annular sector whose apex sits ``apex_offset`` mm behind
    the probe tip on the probe z-axis. ``apex_offset = 0`` gives a plain sector
    with its apex at the tip. ``depth`` is measured radially from the probe
    face.
    """

    depth: float = 180.0
    aperture_deg: float = 70.0
    apex_offset: float = 50.0

    def __post_init__(self):
        if not self.depth > 0:
            raise ValueError("fan depth must be positive")
        if not 0.0 < self.aperture_deg < 180.0:
            raise ValueError("fan aperture must lie in (0, 180) degrees")
        if self.apex_offset < 0:
            raise ValueError("apex offset must be non-negative")

    @property
    def half_angle(self):
        return math.radians(self.aperture_deg) / 2.0

    def half_width(self, axial):
        """Lateral half-width of the sector at the given axial depth."""
        return (np.asarray(axial, dtype=float) + self.apex_offset) * math.tan(self.half_angle)

    def contains(self, u, w, tol=1e-9):
        u = np.asarray(u, dtype=float)
        w = np.asarray(w, dtype=float) + self.apex_offset
        r = np.hypot(u, w)
        ang = np.abs(np.arctan2(u, w))
        return (
            (ang <= self.half_angle + tol)
            & (r <= self.apex_offset + self.depth + tol)
            & (r >= self.apex_offset - tol)
        )

    def image_bounds(self):
        """Axis-aligned (u_min, u_max, w_min, w_max) box around the sector."""
        r_out = self.apex_offset + self.depth
        s, c = math.sin(self.half_angle), math.cos(self.half_angle)
        return -r_out * s, r_out * s, self.apex_offset * c - self.apex_offset, r_out - self.apex_offset


@dataclass(frozen=True, eq=False)
class CanonicalFrameResult:
    frame: RigidTransform
    eigenvalues: np.ndarray

    @property
    def pose(self):
        """Canonical-to-world transform (the inverse of ``frame``)."""
        return self.frame.inverse()


# ---------------------------------------------------------------------------
# operations


def pca_canonical_frame(points, x_ref, y_ref) -> CanonicalFrameResult:
    """Principal-axes frame with anatomically fixed axis signs.

    The first axis is the largest-variance direction signed to agree with
    ``x_ref``; the second is signed by ``y_ref``; the third completes a
    right-handed basis and the second is re-orthogonalized against the first.
    """
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=float)
    if len(pts) < 4:
        raise DegenerateCloud("need at least 4 points for a canonical frame")
    x_ref = np.asarray(x_ref, dtype=float)
    y_ref = np.asarray(y_ref, dtype=float)
    c = pts.mean(axis=0)
    d = pts - c
    cov = d.T @ d / (len(pts) - 1)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w = np.clip(w[order], 0.0, None)
    v = v[:, order]
    if w[0] <= 0.0 or (w[0] - w[1]) <= 1e-6 * w[0]:
        raise DegenerateCloud("largest principal axis is ambiguous")
    sx = float(v[:, 0] @ x_ref)
    sy = float(v[:, 1] @ y_ref)
    if abs(sx) < 1e-6:
        raise InvalidReference("x_ref is orthogonal to the principal axis")
    if abs(sy) < 1e-6:
        raise InvalidReference("y_ref is orthogonal to the secondary axis")
    x = math.copysign(1.0, sx) * v[:, 0]
    y = math.copysign(1.0, sy) * v[:, 1]
    z = unit(np.cross(x, y))
    y = np.cross(z, x)
    r = np.column_stack([x, y, z])
    frame = RigidTransform(r.T, -r.T @ c)
    return CanonicalFrameResult(frame, w)


def default_fps_start(points):
    """Index of the lexicographically smallest point by (x, y, z)."""
    pts = np.asarray(points)
    return int(np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))[0])


def farthest_point_indices(points, k, start=None):
    pts = np.ascontiguousarray(points.points if isinstance(points, PointCloud) else points, dtype=float)
    if k < 1 or k > len(pts):
        raise InvalidCount(f"cannot select {k} of {len(pts)} points")
    if start is None:
        start = default_fps_start(pts)
    return kernels.farthest_point(pts, int(k), int(start))


def farthest_point_sample(points: PointCloud, k, start=None) -> PointCloud:
    return points.subset(farthest_point_indices(points, k, start))


def knn_correspond(source, target):
    """For each target point, the index of its nearest source point."""
    src = source.points if isinstance(source, PointCloud) else source
    tgt = target.points if isinstance(target, PointCloud) else target
    src = np.ascontiguousarray(src, dtype=float)
    tgt = np.ascontiguousarray(tgt, dtype=float)
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("both clouds must be non-empty")
    return kernels.nearest_indices(src, tgt)


def estimate_normals(points: PointCloud, k_neighbors=10) -> PointCloud:
    pts = points.points
    if not 3 <= k_neighbors < len(pts):
        raise InvalidCount("need 3 <= k_neighbors < point count")
    _, idx = cKDTree(pts).query(pts, k=k_neighbors)
    nb = pts[idx]
    d = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", d, d) / k_neighbors
    w, v = np.linalg.eigh(cov)
    if np.any(w[:, 1] <= 1e-12 * np.maximum(w[:, 2], 1e-300)):
        raise DegenerateNeighborhood("local covariance has rank below 2")
    normals = v[:, :, 0]
    outward = np.einsum("ij,ij->i", normals, pts - pts.mean(axis=0))
    normals = np.where(outward[:, None] < 0, -normals, normals)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals)


def section_segments(mesh: TriMesh, probe_pose: RigidTransform):
    """Unclipped mesh cross-section in image coordinates, shape (m, 2, 2)."""
    r = probe_pose.rotation
    tip = probe_pose.translation
    seg3 = kernels.plane_segments(mesh.vertices, mesh.faces, tip, np.ascontiguousarray(r[:, 1]))
    rel = seg3 - tip
    return np.stack([rel @ r[:, 0], rel @ r[:, 2]], axis=-1)


def clip_segments_to_fan(segments, fan: FanSpec):
    """Clip (m, 2, 2) image-plane segments to the fan's annular sector."""
    if len(segments) == 0:
        return np.empty((0, 2, 2))
    a = segments[:, 0, :].copy()
    b = segments[:, 1, :].copy()
    a[:, 1] += fan.apex_offset
    b[:, 1] += fan.apex_offset
    dvec = b - a
    lo = np.zeros(len(a))
    hi = np.ones(len(a))
    # wedge: two half-planes through the apex
    s, c = math.sin(fan.half_angle), math.cos(fan.half_angle)
    for nx, nz in ((c, s), (-c, s)):
        # inside when nx*u + nz*w >= 0
        fa = nx * a[:, 0] + nz * a[:, 1]
        fd = nx * dvec[:, 0] + nz * dvec[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -fa / fd
        enter = fd > 0
        leave = fd < 0
        lo = np.where(enter, np.maximum(lo, t), lo)
        hi = np.where(leave, np.minimum(hi, t), hi)
        outside = (fd == 0) & (fa < 0)
        hi = np.where(outside, -1.0, hi)

    def circle(radius, miss_hi):
        qa = np.einsum("ij,ij->i", dvec, dvec)
        qb = 2.0 * np.einsum("ij,ij->i", a, dvec)
        qc = np.einsum("ij,ij->i", a, a) - radius * radius
        disc = qb * qb - 4 * qa * qc
        ok = (disc >= 0) & (qa > 0)
        root = np.sqrt(np.where(ok, disc, 0.0))
        qa_safe = np.where(qa > 0, qa, 1.0)
        t0 = np.where(ok, (-qb - root) / (2 * qa_safe), np.inf)
        t1 = np.where(ok, (-qb + root) / (2 * qa_safe), miss_hi)
        return t0, t1

    t0, t1 = circle(fan.apex_offset + fan.depth, -np.inf)
    lo = np.maximum(lo, t0)
    hi = np.minimum(hi, t1)
    pieces = []
    if fan.apex_offset > 0:
        i0, i1 = circle(fan.apex_offset, np.inf)
        for plo, phi in ((lo, np.minimum(hi, i0)), (np.maximum(lo, i1), hi)):
            pieces.append((plo, phi))
    else:
        pieces.append((lo, hi))
    out = []
    for plo, phi in pieces:
        keep = phi > plo
        if np.any(keep):
            pa = a[keep] + plo[keep, None] * dvec[keep]
            pb = a[keep] + phi[keep, None] * dvec[keep]
            out.append(np.stack([pa, pb], axis=1))
    if not out:
        return np.empty((0, 2, 2))
    seg = np.concatenate(out)
    seg[:, :, 1] -= fan.apex_offset
    return seg


def slice_mesh_plane(mesh: TriMesh, probe_pose: RigidTransform, fan: FanSpec):
    """Mesh cross-section in the probe image plane, clipped to the fan.

    Returns an (m, 2, 2) array of boundary segments in image coordinates
    (lateral along probe x, axial along probe z). Empty when the plane
    misses the mesh or the section lies outside the fan.
    """
    return clip_segments_to_fan(section_segments(mesh, probe_pose), fan)


def image_to_world(probe_pose: RigidTransform, uw):
    """Back-project image-plane coordinates (..., 2) to the base frame."""
    uw = np.asarray(uw, dtype=float)
    r = probe_pose.rotation
    return probe_pose.translation + uw[..., 0:1] * r[:, 0] + uw[..., 1:2] * r[:, 2]


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    origin: np.ndarray  # corner of voxel (0, 0, 0)
    voxel_mm: float
    occupancy: np.ndarray

    @property
    def count(self):
        return int(self.occupancy.sum())

    @property
    def volume(self):
        return self.count * self.voxel_mm ** 3

    def index_of(self, points):
        return np.floor((np.asarray(points) - self.origin) / self.voxel_mm).astype(np.int64)

    def centers(self):
        idx = np.argwhere(self.occupancy)
        return self.origin + (idx + 0.5) * self.voxel_mm


def voxel_volume(mesh: TriMesh, voxel_mm=1.0) -> VoxelGrid:
    """Voxelize a closed mesh by vertical-ray parity on voxel centers."""
    if voxel_mm <= 0:
        raise ValueError("voxel size must be positive")
    if not mesh.is_closed():
        raise OpenMesh("mesh is not closed")
    lo, hi = mesh.bounds()
    origin = np.floor(lo / voxel_mm) * voxel_mm - voxel_mm
    shape = np.ceil((hi - origin) / voxel_mm).astype(int) + 1
    # irrational column offset keeps rays off shared edges and vertices
    jx = voxel_mm * 1e-7 * math.sqrt(2.0)
    jy = voxel_mm * 1e-7 * math.sqrt(3.0)
    occ = kernels.parity_voxelize(
        mesh.vertices, mesh.faces, origin, float(voxel_mm), int(shape[0]), int(shape[1]), int(shape[2]), jx, jy
    )
    return VoxelGrid(origin, float(voxel_mm), occ)


# ---------------------------------------------------------------------------
# mesh builders


def icosphere(subdivisions=3):
    """Unit icosphere as a closed TriMesh."""
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = np.array(verts, dtype=float)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(faces, dtype=np.int64)
    for _ in range(subdivisions):
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        key = np.sort(edges, axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m_idx = len(v) + inv.reshape(3, -1).T  # (F, 3): mid of edges 01, 12, 20
        v = np.vstack([v, mid])
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = m_idx[:, 0], m_idx[:, 1], m_idx[:, 2]
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
    return TriMesh(v, f)


def sphere_mesh(radius, center=(0.0, 0.0, 0.0), subdivisions=4):
    ico = icosphere(subdivisions)
    return TriMesh(ico.vertices * radius + np.asarray(center, dtype=float), ico.faces)


def ellipsoid_mesh(semi_axes, subdivisions=4):
    ico = icosphere(subdivisions)
    return TriMesh(ico.vertices * np.asarray(semi_axes, dtype=float), ico.faces)


def box_mesh(size, center=(0.0, 0.0, 0.0)):
    sx, sy, sz = np.asarray(size, dtype=float) / 2.0
    c = np.asarray(center, dtype=float)
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]) + c
    f = np.array([
        (0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5),
        (0, 4, 5), (0, 5, 1), (2, 3, 7), (2, 7, 6),
        (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3),
    ])
    return TriMesh(v, f)


def sample_surface(mesh: TriMesh, n, rng) -> PointCloud:
    """Area-uniform random points on a mesh surface."""
    tri = mesh.vertices[mesh.faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    face = rng.choice(len(tri), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    t = tri[face]
    pts = (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]
    return PointCloud(pts)
