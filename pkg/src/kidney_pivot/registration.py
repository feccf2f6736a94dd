"""Partial-to-template kidney localization.

A heuristic initial pose puts the template's long axis along base y, then a
point-to-plane ICP with a per-iteration rotation clamp refines it. ICP works
on the transform that maps the partial cloud into template coordinates; the
result is reported the other way round, template to base.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, RigidTransform, farthest_point_indices, project_to_rotation, skew


@dataclass(frozen=True)
class RegistrationConfig:
    theta_max: float = math.radians(2.0)  # rad per component per iteration
    conv_tol: float = 1e-5  # mm^2
    max_iters: int = 200
    patient_axis_sign: int = 1
    reject_factor: float = 3.0  # pairs beyond this many median distances are dropped
    max_points: int = 1000  # partial clouds are thinned to this many points
    min_points: int = 50

    def __post_init__(self):
        if not self.theta_max > 0:
            raise ValueError("theta_max must be positive")
        if not self.conv_tol > 0:
            raise ValueError("conv_tol must be positive")
        if self.patient_axis_sign not in (1, -1):
            raise ValueError("patient_axis_sign must be +1 or -1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    t_k_b: RigidTransform
    final_error: float
    iterations: int
    converged: bool
    degenerate: bool = False
    initial_error: float = math.nan
    log: tuple = ()


def _template_cloud(template):
    return template.cloud if hasattr(template, "cloud") else template


def initial_rotation(cfg: RegistrationConfig):
    """Template x to sign * base y, template z to base -z."""
    x = np.array([0.0, float(cfg.patient_axis_sign), 0.0])
    z = np.array([0.0, 0.0, -1.0])
    return np.column_stack([x, np.cross(z, x), z])


def initial_alignment(template, p_local: PointCloud, cfg: RegistrationConfig | None = None) -> RigidTransform:
    cfg = RegistrationConfig() if cfg is None else cfg
    if len(p_local) == 0:
        raise ValueError("p_local is empty")
    r0 = initial_rotation(cfg)
    t0 = p_local.centroid() - r0 @ _template_cloud(template).centroid()
    return RigidTransform(r0, t0)


def _residuals(src, tree, tgt_pts, tgt_nrm, reject_factor):
    dist, idx = tree.query(src)
    keep = dist <= reject_factor * np.median(dist) + 1e-12
    r = np.einsum("ij,ij->i", src - tgt_pts[idx], tgt_nrm[idx])
    return r, idx, keep


def icp_register(template, p_local: PointCloud, init: RigidTransform, cfg: RegistrationConfig | None = None,
                 tree=None) -> RegistrationResult:
    """Clamped point-to-plane ICP of ``p_local`` (base frame) onto the template.

    ``init`` and the result map template coordinates into the base frame.
    ``tree`` may hold a prebuilt KD-tree over the template points.
    """
    cfg = RegistrationConfig() if cfg is None else cfg
    tmpl = _template_cloud(template)
    if not tmpl.has_normals:
        raise ValueError("template cloud needs normals")
    if len(p_local) < cfg.min_points:
        raise ValueError(f"need at least {cfg.min_points} points, got {len(p_local)}")
    src = p_local.points
    if len(src) > cfg.max_points:
        src = src[farthest_point_indices(src, cfg.max_points)]
    tgt_pts, tgt_nrm = tmpl.points, tmpl.normals
    tree = cKDTree(tgt_pts) if tree is None else tree

    est = init.inverse()  # base -> template
    r_cur, t_cur = est.rotation, est.translation
    prev = None
    first = None
    log = []
    converged = False
    degenerate = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        moved = src @ r_cur.T + t_cur
        r, idx, keep = _residuals(moved, tree, tgt_pts, tgt_nrm, cfg.reject_factor)
        err = float(np.mean(r[keep] ** 2))
        if first is None:
            first = err
        if prev is not None and abs(prev - err) < cfg.conv_tol:
            converged = True
            log.append((it, err, 0.0, 0.0))
            break
        prev = err
        p, n = moved[keep], tgt_nrm[idx[keep]]
        a = np.hstack([np.cross(p, n), n])
        ata = a.T @ a
        if np.linalg.cond(ata) > 1e12:
            degenerate = True
            break
        x = np.linalg.solve(ata, -a.T @ r[keep])
        dtheta = np.clip(x[:3], -cfg.theta_max, cfg.theta_max)
        dt = x[3:]
        dr = project_to_rotation(np.eye(3) + skew(dtheta))
        r_cur = project_to_rotation(dr @ r_cur)
        t_cur = dr @ t_cur + dt
        log.append((it, err, float(np.linalg.norm(dtheta)), float(np.linalg.norm(dt))))
    final = RigidTransform(r_cur, t_cur)
    moved = src @ r_cur.T + t_cur
    r, _, keep = _residuals(moved, tree, tgt_pts, tgt_nrm, cfg.reject_factor)
    return RegistrationResult(
        t_k_b=final.inverse(),
        final_error=float(np.mean(r[keep] ** 2)),
        iterations=it,
        converged=converged,
        degenerate=degenerate,
        initial_error=float(first) if first is not None else math.nan,
        log=tuple(log),
    )


def localize(template, p_local: PointCloud, cfg: RegistrationConfig | None = None, anchor=None, tree=None):
    """Initial alignment followed by ICP.

    With fewer than ``cfg.min_points`` points ICP is skipped and the initial
    alignment alone is returned. An empty cloud needs ``anchor``, a base-frame
    point taken as the kidney centroid.
    """
    cfg = RegistrationConfig() if cfg is None else cfg
    if len(p_local) < cfg.min_points:
        if len(p_local) == 0:
            if anchor is None:
                raise ValueError("empty cloud and no anchor point")
            r0 = initial_rotation(cfg)
            init = RigidTransform(r0, np.asarray(anchor, float) - r0 @ _template_cloud(template).centroid())
        else:
            init = initial_alignment(template, p_local, cfg)
        return RegistrationResult(init, math.nan, 0, False)
    init = initial_alignment(template, p_local, cfg)
    return icp_register(template, p_local, init, cfg, tree)
