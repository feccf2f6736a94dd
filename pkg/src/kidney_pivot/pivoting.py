"""Pivot pose computation and the kidney sweep strategies.

Pivot sweeps hold the probe tip over the kidney and tilt the image plane
about the transducer axis until the kidney leaves the image on one side,
then tilt back through the start until it leaves on the other side. The
straight-line strategy instead translates the probe across the kidney.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .control import ControlGains, ProbeController, ProbeTarget
from .errors import DegenerateAxis, LostContact, PivotUnreachable
from .geometry import FanSpec, RigidTransform, angle_between, unit
from .kinematics import inverse_kinematics
from .metrics import frame_increments
from .worldsim import (
    Q_SEED,
    SCAN_ROTATION,
    emulate_us_frame,
    exploration_roi,
    frames_to_cloud,
    mask_centroid,
)

DOWN = np.array([0.0, 0.0, -1.0])
_SIN_1DEG = math.sin(math.radians(1.0))


class Strategy(str, Enum):
    OP = "op"
    GTOP = "gtop"
    SL = "sl"
    NOP = "nop"


@dataclass(frozen=True, eq=False)
class PivotPose:
    pose: RigidTransform
    source: str = "estimated"  # or "ground_truth"


@dataclass(frozen=True, eq=False)
class SweepResult:
    frames: list
    strategy: Strategy
    metrics_input: np.ndarray  # per frame pair: (translation increment mm, rotation increment rad)
    tilts: np.ndarray = field(default_factory=lambda: np.empty(0))  # signed tilt per frame, rad
    max_tip_drift: float = 0.0  # largest x-y distance of the tip from the pivot point, mm


def _pivot_from_axis(axis, p):
    horiz = np.array([axis[0], axis[1], 0.0])
    nrm = float(np.linalg.norm(horiz))
    if nrm < _SIN_1DEG:
        raise DegenerateAxis("kidney axis is within 1 degree of vertical")
    r1 = horiz / nrm
    r3 = DOWN.copy()
    r2 = np.cross(r3, r1)  # completes a right-handed frame
    return RigidTransform(np.column_stack([r1, r2, r3]), np.asarray(p, dtype=float).copy())


def optimal_pivot_pose(t_k_b: RigidTransform, source="estimated") -> PivotPose:
    """Probe pointing down over the kidney centroid, array along the kidney's long axis."""
    return PivotPose(_pivot_from_axis(t_k_b.rotation[:, 0], t_k_b.translation), source)


def nop_pivot_pose(t_k_b: RigidTransform, source="estimated") -> PivotPose:
    """As :func:`optimal_pivot_pose` but with the array along the kidney's middle axis."""
    return PivotPose(_pivot_from_axis(t_k_b.rotation[:, 1], t_k_b.translation), source)


def rodrigues_step(a_des, o_des, dtheta):
    """Tilt ``a_des`` about ``o_des`` by ``dtheta``, renormalized and kept orthogonal to ``o_des``."""
    a = np.asarray(a_des, dtype=float)
    o = np.asarray(o_des, dtype=float)
    a_new = a * math.cos(dtheta) + np.cross(o, a) * math.sin(dtheta)
    a_new = a_new - (a_new @ o) * o
    return unit(a_new)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class _Recorder:
    patient: object
    fan: FanSpec
    frame_every: int
    frames: list = field(default_factory=list)
    tilts: list = field(default_factory=list)
    low_force_time: float = 0.0

    def observe(self, step, pose, t, tilt=0.0):
        if step % self.frame_every:
            return None
        fr = emulate_us_frame(self.patient, pose, self.fan, t)
        self.frames.append(fr)
        self.tilts.append(tilt)
        return fr


def _check_contact(ctrl, rec, pose, dt):
    if ctrl.world.contact_force(pose) < 0.5:
        rec.low_force_time += dt
        if rec.low_force_time > 1.0:
            raise LostContact(f"contact force below 0.5 N for over 1 s at t = {ctrl.t:.2f} s")
    else:
        rec.low_force_time = 0.0


def servo_to_pose(ctrl: ProbeController, target_pose: RigidTransform, timeout=30.0, tol_mm=0.5, tol_rad=math.radians(0.5)):
    """Drive the probe to the target axes and tip x/y under force control."""
    r = target_pose.rotation
    target = ProbeTarget(r[:, 2], r[:, 0], target_pose.translation[0], target_pose.translation[1])
    f_tol = 0.5
    while ctrl.t <= timeout:
        pose = ctrl.pose()
        a_err = angle_between(pose.rotation[:, 2], target.a_des)
        o_err = angle_between(pose.rotation[:, 0], target.o_des)
        xy_err = math.hypot(pose.translation[0] - target.P_hat_x, pose.translation[1] - target.P_hat_y)
        f_err = abs(ctrl.world.contact_force(pose) - ctrl.gains.F_hat)
        if a_err < tol_rad and o_err < tol_rad and xy_err < tol_mm and f_err < f_tol:
            return target
        ctrl.step(target, pose=pose)
    raise PivotUnreachable(f"probe did not settle on the pivot pose within {timeout:.0f} s")


def approach_configuration(patient, chain, pose: RigidTransform, gains, q_seed=None):
    """Joint configuration placing the probe at ``pose`` x/y, pressed to the setpoint force."""
    p = pose.translation
    z = float(patient.surface_height(p[0], p[1])) - gains.F_hat / patient.k_contact
    q, _ = inverse_kinematics(chain, RigidTransform(pose.rotation, np.array([p[0], p[1], z])),
                              Q_SEED if q_seed is None else q_seed)
    return q


def _tilt_phase(ctrl, rec, target, direction, rate, theta, theta_max, empty_needed, step, dt, start_xy, drift):
    """Tilt until ``empty_needed`` consecutive empty frames, starting from tilt ``theta``."""
    empty_run = 0
    seen_since_start = False
    while True:
        pose = ctrl.pose()
        drift[0] = max(drift[0], math.hypot(pose.translation[0] - start_xy[0], pose.translation[1] - start_xy[1]))
        _check_contact(ctrl, rec, pose, dt)
        fr = rec.observe(step, pose, ctrl.t, theta)
        if fr is not None:
            if fr.empty:
                empty_run += 1
                # the run only counts once the kidney has been in view during this phase
                if seen_since_start and empty_run >= empty_needed:
                    return target, theta, step
            else:
                empty_run = 0
                seen_since_start = True
        if abs(theta) >= theta_max:
            return target, theta, step
        dth = direction * rate * dt
        a_new = rodrigues_step(target.a_des, target.o_des, dth)
        a_rate = (a_new - target.a_des) / dt
        target = target.replace(a_des=a_new)
        theta += dth
        ctrl.step(target, a_des_rate=a_rate, pose=pose)
        step += 1


def pivot_sweep(ctrl: ProbeController, patient, pivot: PivotPose, fan: FanSpec, strategy=Strategy.OP,
                debounce_s=0.5, frame_period=0.05):
    """Fixed-tip fan sweep about the pivot pose's transducer axis.

    Phase 1 tilts one way until the kidney has been out of view for
    ``debounce_s``; phase 2 tilts back through the start until the same
    happens on the other side. Only phase-2 frames are returned, so the
    sweep starts and ends on empty images.
    """
    gains = ctrl.gains
    dt = ctrl.dt
    target = servo_to_pose(ctrl, pivot.pose)
    ctrl.t = 0.0
    start_xy = (target.P_hat_x, target.P_hat_y)
    frame_every = max(1, int(round(frame_period / dt)))
    empty_needed = max(1, int(round(debounce_s / frame_period)))
    drift = [0.0]
    scratch = _Recorder(patient, fan, frame_every)
    target, theta, _ = _tilt_phase(ctrl, scratch, target, +1, gains.theta_rate, 0.0, gains.theta_max,
                                   empty_needed, 0, dt, start_xy, drift)
    rec = _Recorder(patient, fan, frame_every)
    target, theta, _ = _tilt_phase(ctrl, rec, target, -1, gains.theta_rate, theta, gains.theta_max,
                                   empty_needed, 0, dt, start_xy, drift)
    return _result(rec.frames, strategy, rec.tilts, drift[0])


def straight_sweep(ctrl: ProbeController, patient, fan: FanSpec, margin=10.0, frame_period=0.05):
    """Translate along base -y across the E-ROI plus ``margin`` on each side, centering the kidney."""
    gains = ctrl.gains
    dt = ctrl.dt
    roi = exploration_roi(patient)
    y0, y1 = roi.y_max + margin, roi.y_min - margin
    start = RigidTransform(SCAN_ROTATION, np.array([roi.x_center, y0, 0.0]))
    target = servo_to_pose(ctrl, start)
    ctrl.t = 0.0
    rec = _Recorder(patient, fan, max(1, int(round(frame_period / dt))))
    step = 0
    c = None
    max_steps = int(math.ceil(((y0 - y1) / gains.v_scan + 60.0) / dt))
    while step < max_steps:
        pose = ctrl.pose()
        # stop on the commanded point; the tip trails it by v_scan / K_p5
        if target.P_hat_y <= y1:
            break
        _check_contact(ctrl, rec, pose, dt)
        fr = rec.observe(step, pose, ctrl.t)
        if fr is not None:
            c = mask_centroid(fr, fan)
        delta = 0.0 if c is None else gains.K_p7 * (c - 0.5)
        target = target.replace(
            P_hat_x=target.P_hat_x + delta * dt * float(pose.rotation[0, 0]),
            P_hat_y=target.P_hat_y - gains.v_scan * dt,
        )
        ctrl.step(target, pose=pose)
        step += 1
    return _result(rec.frames, Strategy.SL, rec.tilts, 0.0)


def _result(frames, strategy, tilts, drift):
    return SweepResult(frames, Strategy(strategy), frame_increments(frames), np.asarray(tilts, dtype=float), drift)


def run_sweep(patient, chain, q0, pivot: PivotPose | None, gains: ControlGains, fan: FanSpec | None = None,
              dt=0.01, strategy=Strategy.OP, damping=1e-2) -> SweepResult:
    """Run one sweep strategy on a patient.

    ``q0 = None`` starts from an inverse-kinematics placement over the pivot
    point (or the E-ROI superior edge for the straight sweep).
    """
    strategy = Strategy(strategy)
    fan = FanSpec() if fan is None else fan
    if strategy is Strategy.SL:
        if q0 is None:
            roi = exploration_roi(patient)
            q0 = approach_configuration(
                patient, chain, RigidTransform(SCAN_ROTATION, np.array([roi.x_center, roi.y_max + 10.0, 0.0])), gains
            )
        ctrl = ProbeController(patient, chain, q0, gains, dt, damping)
        return straight_sweep(ctrl, patient, fan)
    if pivot is None:
        raise ValueError(f"strategy {strategy.value} needs a pivot pose")
    if q0 is None:
        q0 = approach_configuration(patient, chain, pivot.pose, gains)
    ctrl = ProbeController(patient, chain, q0, gains, dt, damping)
    return pivot_sweep(ctrl, patient, pivot, fan, strategy)


def sweep_cloud(result: SweepResult):
    return frames_to_cloud(result.frames)
