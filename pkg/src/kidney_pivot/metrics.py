"""Localization error, sweep efficiency, volume coverage and the paired t-test."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import betainc

from . import kernels
from .errors import EmptyGroundTruth
from .geometry import RigidTransform, angle_between, rotation_angle, section_segments, voxel_volume


class DegenerateSample(UserWarning):
    """All paired differences are identical, so the t statistic is not finite."""


class LocalizationError(NamedTuple):
    e_trans: float  # mm, x-y only
    e_rot_x: float  # degrees


@dataclass(frozen=True)
class SweepMetrics:
    epsilon: float
    n: int
    v_curve: list = field(default_factory=list)  # (epsilon_i, n_i, V_i)


def localization_error(t_est: RigidTransform, t_gt: RigidTransform) -> LocalizationError:
    d = t_est.translation - t_gt.translation
    e_rot = math.degrees(angle_between(t_est.rotation[:, 0], t_gt.rotation[:, 0]))
    return LocalizationError(float(math.hypot(d[0], d[1])), e_rot)


def frame_increments(frames):
    """(translation, geodesic rotation) increments between consecutive frames."""
    inc = np.zeros((max(len(frames) - 1, 0), 2))
    for i in range(len(frames) - 1):
        a, b = frames[i].probe_pose, frames[i + 1].probe_pose
        inc[i, 0] = np.linalg.norm(b.translation - a.translation)
        inc[i, 1] = rotation_angle(a.rotation.T @ b.rotation)
    return inc


def cumulative_epsilon(frames, L):
    """Imaging-window path length after each frame; the first entry is 0."""
    if not L > 0:
        raise ValueError("L must be positive")
    inc = frame_increments(frames)
    step = np.sqrt(inc[:, 0] ** 2 + (L * inc[:, 1]) ** 2)
    return np.concatenate([[0.0], np.cumsum(step)]) if len(frames) else np.zeros(0)


def sweep_efficiency(frames, L) -> SweepMetrics:
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    eps = cumulative_epsilon(frames, L)
    return SweepMetrics(float(eps[-1]), len(frames))


# ---------------------------------------------------------------------------
# volume coverage

def frame_interior_points(mesh, frame, fan, pixel_mm):
    """Base-frame centers of image pixels inside both the kidney section and the fan."""
    seg = section_segments(mesh, frame.probe_pose)
    if len(seg) == 0:
        return np.empty((0, 3))
    u_lo, u_hi, w_lo, w_hi = fan.image_bounds()
    lo = np.maximum(seg.reshape(-1, 2).min(axis=0), (u_lo, w_lo))
    hi = np.minimum(seg.reshape(-1, 2).max(axis=0), (u_hi, w_hi))
    if np.any(hi <= lo):
        return np.empty((0, 3))
    nu = int(math.ceil((hi[0] - lo[0]) / pixel_mm)) + 1
    nw = int(math.ceil((hi[1] - lo[1]) / pixel_mm)) + 1
    img = kernels.fill_even_odd(np.ascontiguousarray(seg), float(lo[0]), float(lo[1]), float(pixel_mm), nu, nw)
    wi, uj = np.nonzero(img)
    u = lo[0] + (uj + 0.5) * pixel_mm
    w = lo[1] + (wi + 0.5) * pixel_mm
    inside = fan.contains(u, w)
    u, w = u[inside], w[inside]
    r = frame.probe_pose.rotation
    return frame.probe_pose.translation + u[:, None] * r[:, 0] + w[:, None] * r[:, 2]


def volume_ratio_curve(frames, fan, voxel_mm=1.0, patient=None, proxy_cloud=None):
    """Coverage ratio V_i after each of the frames.

    With ``patient`` the reference is the voxelized kidney and each frame
    contributes the filled kidney section inside its fan. With
    ``proxy_cloud`` the reference is the occupancy of that cloud and each
    frame contributes its back-projected mask boundary. Covered voxels are
    dilated by one voxel in both modes.
    """
    if patient is not None:
        grid = patient.kidney_grid if voxel_mm == 1.0 else voxel_volume(patient.kidney_mesh, voxel_mm)
        ref = grid.occupancy
        origin = grid.origin
    elif proxy_cloud is not None:
        pts = proxy_cloud.points
        if len(pts) == 0:
            raise EmptyGroundTruth("proxy cloud is empty")
        origin = np.floor(pts.min(axis=0) / voxel_mm) * voxel_mm - 2 * voxel_mm
        shape = tuple(np.ceil((pts.max(axis=0) - origin) / voxel_mm).astype(int) + 3)
        ref = np.zeros(shape, dtype=bool)
        idx = np.ascontiguousarray(np.floor((pts - origin) / voxel_mm).astype(np.int64))
        kernels.cover_dilated(idx, np.ones(shape, dtype=bool), ref)
    else:
        raise EmptyGroundTruth("need a patient or a proxy cloud")
    total = int(ref.sum())
    if total == 0:
        raise EmptyGroundTruth("reference volume is empty")
    covered = np.zeros(ref.shape, dtype=bool)
    count = 0
    out = []
    for fr in frames:
        if patient is not None:
            pts = frame_interior_points(patient.kidney_mesh, fr, fan, voxel_mm / 2.0)
        else:
            pts = fr.world_points()
        if len(pts):
            idx = np.ascontiguousarray(np.floor((pts - origin) / voxel_mm).astype(np.int64))
            count += kernels.cover_dilated(idx, ref, covered)
        out.append(count / total)
    return out


def efficiency_curve(frames, L, fan, voxel_mm=1.0, patient=None, proxy_cloud=None) -> SweepMetrics:
    eps = cumulative_epsilon(frames, L)
    v = volume_ratio_curve(frames, fan, voxel_mm, patient, proxy_cloud)
    curve = [(float(e), i + 1, float(vi)) for i, (e, vi) in enumerate(zip(eps, v))]
    return SweepMetrics(float(eps[-1]) if len(eps) else 0.0, len(frames), curve)


# ---------------------------------------------------------------------------
# statistics


class TTestResult(NamedTuple):
    t: float
    p: float


def student_t_sf(t, df):
    """Upper-tail probability P(T > t) of Student's t with ``df`` degrees of freedom."""
    x = df / (df + t * t)
    tail = 0.5 * betainc(df / 2.0, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


def paired_t_test(sample_a, sample_b) -> TTestResult:
    """Two-sided paired t-test on ``a - b``."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("samples must be equal-length 1-D sequences of at least 2 values")
    d = a - b
    n = len(d)
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0)
        warnings.warn("all paired differences are identical", DegenerateSample, stacklevel=2)
        return TTestResult(math.copysign(math.inf, mean), 0.0)
    t = float(mean / (sd / math.sqrt(n)))
    p = float(min(1.0, 2.0 * student_t_sf(abs(t), n - 1)))
    return TTestResult(t, p)
