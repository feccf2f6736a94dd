"""Virtual patients, contact model, emulated ultrasound frames and exploration.

A patient is a smooth body surface given as a height field ``z = s(x, y)``
and a closed kidney mesh beneath it, both in the robot base frame. The
kidney's long axis runs roughly along base y with its superior pole toward
+y; exploration slides the probe from the superior edge toward -y.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .control import ProbeController, ProbeTarget
from .errors import InvalidParams, LostKidney, Unreachable
from .geometry import (
    FanSpec,
    PointCloud,
    RigidTransform,
    TriMesh,
    icosphere,
    image_to_world,
    pca_canonical_frame,
    rot_y,
    rot_z,
    sample_surface,
    slice_mesh_plane,
    voxel_volume,
)
from .kinematics import forward_kinematics, inverse_kinematics

# canonical kidney axes: x superior (base +y), y lateral (base +x)
X_REF = np.array([0.0, 1.0, 0.0])
Y_REF = np.array([1.0, 0.0, 0.0])
# local kidney model axes -> base axes for an unrotated kidney
R_NOMINAL = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
# probe pose used for scanning: array along base x, pointing down
SCAN_ROTATION = np.diag([1.0, -1.0, -1.0])
# a typical elbow-up configuration used to seed inverse kinematics
Q_SEED = np.array([0.0, -0.3, 0.0, -2.2, 0.0, 1.9, 0.0])


# ---------------------------------------------------------------------------
# body surfaces


@dataclass(frozen=True)
class CylinderSurface:
    """Body patch shaped as a cylinder running along base y."""

    x_center: float = 480.0
    z_top: float = 150.0
    radius: float = 400.0

    def height(self, x, y):
        if np.isscalar(x) and np.isscalar(y):
            dx = float(x) - self.x_center
            if abs(dx) >= self.radius:
                return -math.inf
            return self.z_top - self.radius + math.sqrt(self.radius**2 - dx * dx)
        dx = np.asarray(x, dtype=float) - self.x_center
        inside = np.abs(dx) < self.radius
        root = np.sqrt(np.where(inside, self.radius**2 - dx * dx, 0.0))
        h = np.where(inside, self.z_top - self.radius + root, -np.inf)
        return h + 0.0 * np.asarray(y, dtype=float)


@dataclass(frozen=True, eq=False)
class GridSurface:
    """Height field sampled on a rectangular grid, bilinear in between."""

    xs: np.ndarray
    ys: np.ndarray
    zs: np.ndarray  # shape (len(ys), len(xs))

    def __post_init__(self):
        from scipy.interpolate import RegularGridInterpolator

        zs = np.asarray(self.zs, dtype=float)
        if zs.shape != (len(self.ys), len(self.xs)):
            raise ValueError("height grid shape must be (len(ys), len(xs))")
        interp = RegularGridInterpolator(
            (np.asarray(self.ys, float), np.asarray(self.xs, float)), zs, bounds_error=False, fill_value=-np.inf
        )
        object.__setattr__(self, "_interp", interp)

    def height(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        x, y = np.broadcast_arrays(x, y)
        out = self._interp(np.stack([y.ravel(), x.ravel()], axis=-1))
        return out.reshape(x.shape) if x.ndim else float(out[0])


# ---------------------------------------------------------------------------
# patients


@dataclass(frozen=True)
class PatientParams:
    """Sampling ranges (lo, hi) for synthetic patients. Lengths in mm, angles in degrees."""

    semi_x: tuple = (45.0, 60.0)
    semi_y: tuple = (25.0, 32.0)
    semi_z: tuple = (20.0, 28.0)
    exponent: tuple = (0.8, 1.2)
    bend_deg: tuple = (5.0, 15.0)
    depth: tuple = (40.0, 70.0)
    yaw_deg: tuple = (-30.0, 30.0)
    pitch_deg: tuple = (-20.0, 20.0)
    body_radius: tuple = (300.0, 500.0)
    center_x: tuple = (460.0, 500.0)
    center_y: tuple = (-20.0, 20.0)
    body_x_center: float = 480.0
    body_z_top: float = 150.0
    min_axis_gap: float = 3.0
    subdivisions: int = 4

    def __post_init__(self):
        for name in ("semi_x", "semi_y", "semi_z", "exponent", "bend_deg", "depth",
                     "yaw_deg", "pitch_deg", "body_radius", "center_x", "center_y"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise InvalidParams(f"empty range for {name}: ({lo}, {hi})")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.semi_x[0] <= 0 or self.semi_y[0] <= 0 or self.semi_z[0] <= 0:
            raise InvalidParams("semi-axes must be positive")
        if self.exponent[0] <= 0:
            raise InvalidParams("exponent must be positive")
        if self.depth[0] < 5.0:
            raise InvalidParams("kidney must sit at least 5 mm under the surface")

    @classmethod
    def axis_aligned(cls, **kw):
        """Parameters with no bend, yaw or pitch."""
        base = dict(bend_deg=(0.0, 0.0), yaw_deg=(0.0, 0.0), pitch_deg=(0.0, 0.0))
        base.update(kw)
        return cls(**base)


def bean_mesh(semi_axes, exponent=1.0, bend_deg=0.0, subdivisions=4) -> TriMesh:
    """Kidney-like closed mesh in its local frame.

    A superellipsoid (componentwise signed power ``exponent`` of a unit
    sphere) bent in the x-y plane so that both poles curl toward -y by
    ``bend_deg / 2`` each.
    """
    ico = icosphere(subdivisions)
    u = ico.vertices
    p = np.sign(u) * np.abs(u) ** exponent * np.asarray(semi_axes, dtype=float)
    beta = math.radians(bend_deg)
    if beta > 0:
        rb = semi_axes[0] / (beta / 2.0)
        th = p[:, 0] / rb
        r = rb + p[:, 1]
        p = np.column_stack([r * np.sin(th), r * np.cos(th) - rb, p[:, 2]])
    return TriMesh(p, ico.faces)


@dataclass(frozen=True, eq=False)
class VirtualPatient:
    body_surface: object
    kidney_mesh: TriMesh
    kidney_gt_pose: RigidTransform
    k_contact: float = 3.0
    seed: int | None = None
    shape: dict = field(default_factory=dict)

    @cached_property
    def kidney_grid(self):
        return voxel_volume(self.kidney_mesh, 1.0)

    @property
    def kidney_gt_volume(self):
        return self.kidney_grid.volume

    def surface_height(self, x, y):
        return self.body_surface.height(x, y)

    def contact_force(self, probe_pose):
        return contact_force(self, probe_pose, self.k_contact)

    @cached_property
    def axis_ratio(self):
        """Long over middle extent of the kidney in its canonical frame."""
        local = self.kidney_gt_pose.inverse().apply(self.kidney_mesh.vertices)
        ext = local.max(axis=0) - local.min(axis=0)
        return float(ext[0] / ext[1])

    def below_surface_margin(self):
        v = self.kidney_mesh.vertices
        return float(np.min(self.surface_height(v[:, 0], v[:, 1]) - v[:, 2]))


def kidney_pose_from_mesh(mesh: TriMesh) -> RigidTransform:
    return pca_canonical_frame(mesh.vertices, X_REF, Y_REF).pose


def _draw(rng, rng_range):
    lo, hi = rng_range
    return float(lo + (hi - lo) * rng.random())


def draw_kidney_shape(rng, params: PatientParams):
    """Semi-axes, exponent and bend of one random kidney."""
    a = _draw(rng, params.semi_x)
    b = _draw(rng, params.semi_y)
    # keep the two short axes apart so the canonical frame is well defined
    c_hi = max(params.semi_z[0], min(params.semi_z[1], b - params.min_axis_gap))
    c = _draw(rng, (params.semi_z[0], c_hi))
    e = _draw(rng, params.exponent)
    bend = _draw(rng, params.bend_deg)
    return (a, b, c), e, bend


def synthetic_kidney_cloud(seed, params: PatientParams | None = None, n_points=4000) -> PointCloud:
    """Surface samples of a random kidney in its local frame, for template cohorts."""
    params = PatientParams() if params is None else params
    rng = np.random.default_rng(seed)
    axes, e, bend = draw_kidney_shape(rng, params)
    return sample_surface(bean_mesh(axes, e, bend, params.subdivisions), n_points, rng)


def make_synthetic_patient(seed, params: PatientParams | None = None, k_contact=3.0) -> VirtualPatient:
    params = PatientParams() if params is None else params
    rng = np.random.default_rng(seed)
    (a, b, c), e, bend = draw_kidney_shape(rng, params)
    depth = _draw(rng, params.depth)
    yaw = _draw(rng, params.yaw_deg)
    pitch = _draw(rng, params.pitch_deg)
    radius = _draw(rng, params.body_radius)
    cx = _draw(rng, params.center_x)
    cy = _draw(rng, params.center_y)

    local = bean_mesh((a, b, c), e, bend, params.subdivisions)
    rot = rot_z(math.radians(yaw)) @ R_NOMINAL @ rot_y(math.radians(pitch))
    verts = local.vertices @ rot.T + np.array([cx, cy, 0.0])
    surface = CylinderSurface(params.body_x_center, params.body_z_top, radius)
    # drop the kidney so that its closest approach to the skin equals depth
    clearance = np.min(surface.height(verts[:, 0], verts[:, 1]) - verts[:, 2])
    verts[:, 2] += clearance - depth
    mesh = TriMesh(verts, local.faces)
    shape = dict(semi_axes=(a, b, c), exponent=e, bend_deg=bend, depth=depth,
                 yaw_deg=yaw, pitch_deg=pitch, body_radius=radius)
    return VirtualPatient(surface, mesh, kidney_pose_from_mesh(mesh), k_contact, seed, shape)


def patient_from_mesh(mesh: TriMesh, surface=None, k_contact=3.0) -> VirtualPatient:
    """Wrap user anatomy; without a surface a cylinder 55 mm above the kidney is used."""
    if surface is None:
        lo, hi = mesh.bounds()
        surface = CylinderSurface(float((lo[0] + hi[0]) / 2), float(hi[2] + 55.0), 400.0)
    return VirtualPatient(surface, mesh, kidney_pose_from_mesh(mesh), k_contact)


def contact_force(patient, probe_pose: RigidTransform, k_contact=3.0):
    """Spring contact: k times the vertical penetration of the tip below the skin."""
    if not k_contact > 0:
        raise ValueError("k_contact must be positive")
    tip = probe_pose.translation
    d = float(patient.surface_height(tip[0], tip[1])) - tip[2]
    return k_contact * max(0.0, d)


# ---------------------------------------------------------------------------
# ultrasound frames


@dataclass(frozen=True, eq=False)
class USFrameRecord:
    """One emulated frame. ``segments`` holds the mask boundary as (m, 2, 2)
    image-plane segments (lateral, axial) in mm."""

    probe_pose: RigidTransform
    segments: np.ndarray
    t: float

    @property
    def empty(self):
        return len(self.segments) == 0

    @cached_property
    def mask_boundary(self):
        if self.empty:
            return np.empty((0, 2))
        return np.unique(self.segments.reshape(-1, 2), axis=0)

    def world_points(self):
        return image_to_world(self.probe_pose, self.mask_boundary)


def emulate_us_frame(patient, probe_pose, fan: FanSpec, t=0.0) -> USFrameRecord:
    return USFrameRecord(probe_pose, slice_mesh_plane(patient.kidney_mesh, probe_pose, fan), float(t))


def mask_centroid(frame: USFrameRecord, fan: FanSpec):
    """Lateral mask centroid normalized to [0, 1] across the fan width at the mask's mean depth.

    Returns None for an empty mask.
    """
    if frame.empty:
        return None
    pts = frame.segments.reshape(-1, 2)
    hw = float(fan.half_width(pts[:, 1].mean()))
    if hw <= 0:
        return 0.5
    return float(np.clip((pts[:, 0].mean() + hw) / (2.0 * hw), 0.0, 1.0))


# ---------------------------------------------------------------------------
# exploration


@dataclass(frozen=True)
class ExplorationROI:
    """Kidney bounding box projected onto the skin (base x-y)."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float

    @property
    def x_center(self):
        return 0.5 * (self.x_min + self.x_max)

    @property
    def y_center(self):
        return 0.5 * (self.y_min + self.y_max)

    @property
    def extent_y(self):
        return self.y_max - self.y_min


def exploration_roi(patient) -> ExplorationROI:
    lo, hi = patient.kidney_mesh.bounds()
    return ExplorationROI(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]))


@dataclass(frozen=True, eq=False)
class ExplorationResult:
    frames: list
    cloud: PointCloud
    path_length: float
    er_used: float
    tips: np.ndarray  # tip position at the start of every control step
    frame_steps: np.ndarray  # control step index of each frame
    y_start: float
    extent: float
    lost_at_step: int | None = None  # first step at which the kidney was lost, if any


def frames_to_cloud(frames) -> PointCloud:
    pts = [f.world_points() for f in frames if not f.empty]
    if not pts:
        return PointCloud(np.empty((0, 3)))
    return PointCloud(np.concatenate(pts))


def start_configuration(patient, chain, x, y, gains, q_seed=None):
    """Joint configuration with the probe pointing down at (x, y), pressed to the setpoint force."""
    z = float(patient.surface_height(x, y)) - gains.F_hat / patient.k_contact
    target = RigidTransform(SCAN_ROTATION, np.array([x, y, z]))
    q, ok = inverse_kinematics(chain, target, Q_SEED if q_seed is None else q_seed)
    if not ok:
        raise Unreachable(f"start pose ({x:.1f}, {y:.1f}) is out of reach")
    return q


def _explore(patient, chain, q0, gains, length, start_offset, fan, dt, damping, trace, raise_lost):
    roi = exploration_roi(patient)
    x0 = roi.x_center + start_offset
    y0 = roi.y_max
    if q0 is None:
        q0 = start_configuration(patient, chain, x0, y0, gains)
    ctrl = ProbeController(patient, chain, q0, gains, dt, damping, trace)
    target = ProbeTarget(SCAN_ROTATION[:, 2], SCAN_ROTATION[:, 0], x0, y0)
    frame_every = max(1, int(round(0.05 / dt)))
    max_steps = int(math.ceil((length / gains.v_scan + 60.0) / dt))
    frames, frame_steps, tips = [], [], []
    seen = False
    last_seen = 0.0
    lost_at = None
    c = None
    step = 0
    while True:
        pose = forward_kinematics(chain, ctrl.q)
        tips.append(pose.translation)
        if length <= 0.0 or y0 - pose.translation[1] >= length or step >= max_steps:
            break
        if step % frame_every == 0:
            fr = emulate_us_frame(patient, pose, fan, ctrl.t)
            frames.append(fr)
            frame_steps.append(step)
            c = mask_centroid(fr, fan)
            if c is not None:
                seen = True
                last_seen = ctrl.t
            elif seen and ctrl.t - last_seen > 2.0:
                lost_at = step
                if raise_lost:
                    raise LostKidney(f"kidney out of view for over 2 s at t = {ctrl.t:.2f} s")
                break
        delta = 0.0 if c is None else gains.K_p7 * (c - 0.5)
        x_gain = float(pose.rotation[0, 0])  # probe x projected on base x
        target = target.replace(
            P_hat_x=target.P_hat_x + delta * dt * x_gain,
            P_hat_y=target.P_hat_y - gains.v_scan * dt,
        )
        ctrl.step(target, pose=pose)
        step += 1
    tips = np.array(tips)
    return ExplorationResult(
        frames=frames,
        cloud=frames_to_cloud(frames),
        path_length=float(np.linalg.norm(np.diff(tips, axis=0), axis=1).sum()),
        er_used=float(length / roi.extent_y) if roi.extent_y > 0 else 0.0,
        tips=tips,
        frame_steps=np.array(frame_steps, dtype=np.int64),
        y_start=y0,
        extent=roi.extent_y,
        lost_at_step=lost_at,
    )


def run_exploration(patient, chain, q0, gains, er, start_offset=0.0, fan=None, dt=0.01, damping=1e-2, trace=None):
    """Slide the probe from the superior E-ROI edge toward -y, centering the kidney in the image.

    The run stops once the tip has travelled ``er`` times the E-ROI length
    along base y. ``q0 = None`` places the probe at the start point by
    inverse kinematics.
    """
    if not 0.0 <= er <= 1.0:
        raise ValueError("er must lie in [0, 1]")
    fan = FanSpec() if fan is None else fan
    length = er * exploration_roi(patient).extent_y
    return _explore(patient, chain, q0, gains, length, start_offset, fan, dt, damping, trace, True)


def explore_full(patient, chain, q0, gains, start_offset=0.0, fan=None, dt=0.01, damping=1e-2):
    """Full-length exploration that records a lost kidney instead of raising.

    Shorter runs are prefixes of this one; see :func:`truncate_exploration`.
    """
    fan = FanSpec() if fan is None else fan
    length = exploration_roi(patient).extent_y
    return _explore(patient, chain, q0, gains, length, start_offset, fan, dt, damping, None, False)


def truncate_exploration(result: ExplorationResult, er) -> ExplorationResult:
    """The result a run with exploration ratio ``er`` would have produced."""
    length = er * result.extent
    travelled = result.y_start - result.tips[:, 1]
    hit = np.nonzero(travelled >= length)[0]
    if length <= 0.0:
        k = 0
    elif len(hit):
        k = int(hit[0])
    elif result.lost_at_step is not None:
        raise LostKidney("kidney was lost before the requested exploration length")
    else:
        k = len(result.tips) - 1
    if result.lost_at_step is not None and k > result.lost_at_step:
        raise LostKidney("kidney was lost before the requested exploration length")
    keep = result.frame_steps < k
    frames = [f for f, m in zip(result.frames, keep) if m]
    tips = result.tips[: k + 1]
    # frames_to_cloud concatenates in frame order, so the prefix cloud is a prefix of the points
    n_pts = sum(len(f.mask_boundary) for f in frames)
    return ExplorationResult(
        frames=frames,
        cloud=result.cloud.subset(np.arange(n_pts)),
        path_length=float(np.linalg.norm(np.diff(tips, axis=0), axis=1).sum()),
        er_used=float(er),
        tips=tips,
        frame_steps=result.frame_steps[keep],
        y_start=result.y_start,
        extent=result.extent,
    )


# ---------------------------------------------------------------------------
# import / export


def export_patient(patient: VirtualPatient, out_dir):
    from . import io

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_obj(out / "kidney.obj", patient.kidney_mesh)
    io.write_ply(out / "kidney.ply", PointCloud(patient.kidney_mesh.vertices))
    io.write_pose(out / "kidney_gt_pose.txt", patient.kidney_gt_pose)
    lo, hi = patient.kidney_mesh.bounds()
    xs = np.arange(math.floor(lo[0]) - 100, math.ceil(hi[0]) + 101, 5.0)
    ys = np.arange(math.floor(lo[1]) - 100, math.ceil(hi[1]) + 101, 5.0)
    gx, gy = np.meshgrid(xs, ys)
    io.write_heightfield_csv(out / "body_surface.csv", xs, ys, patient.surface_height(gx, gy))


def import_patient(obj_path, surface_csv=None, k_contact=3.0) -> VirtualPatient:
    from . import io

    surface = None
    if surface_csv is not None:
        xs, ys, zs = io.read_heightfield_csv(surface_csv)
        surface = GridSurface(xs, ys, zs)
    return patient_from_mesh(io.read_obj(obj_path), surface, k_contact)
