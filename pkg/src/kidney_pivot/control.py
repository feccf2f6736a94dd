"""Velocity-level probe controller.

The probe approach axis ``a`` (probe z) and transducer axis ``o`` (probe x)
are aligned to their targets with decoupled angular terms, contact force is
regulated by a PD law along ``a``, and the tip's base-frame x/y follow a
target point. The resulting twist is mapped to joint rates by the
kinematics solver and integrated with explicit Euler.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np

from .geometry import RigidTransform, unit
from .kinematics import JointState, forward_kinematics, solve_joint_velocities


@dataclass(frozen=True)
class ControlGains:
    K_p1: float = 2.0
    K_p11: float = 1.0
    K_p2: float = 2.0
    K_p3: float = 0.2  # mm/s per N
    K_d1: float = 0.05
    K_p4: float = 1.0  # 1/s
    K_p5: float = 1.0  # 1/s
    K_p6: float = 0.5
    K_p7: float = 20.0  # mm/s per unit of mask offset
    F_hat: float = 9.0  # N
    v_scan: float = 5.0  # mm/s
    theta_rate: float = math.radians(5.0)  # rad/s
    theta_max: float = math.radians(75.0)  # sweep tilt safety bound, rad

    def __post_init__(self):
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ValueError(f"gain {f.name} must be finite")
        for name in ("K_p1", "K_p2", "K_p3", "K_p4", "K_p5"):
            if not getattr(self, name) > 0:
                raise ValueError(f"gain {name} must be positive")


@dataclass(frozen=True, eq=False)
class ProbeTarget:
    """Desired probe axes and tip x/y.

    ``o_des`` is re-orthogonalized against ``a_des`` on construction.
    """

    a_des: np.ndarray
    o_des: np.ndarray
    P_hat_x: float
    P_hat_y: float

    def __post_init__(self):
        a = unit(np.asarray(self.a_des, dtype=float))
        o = np.asarray(self.o_des, dtype=float)
        o = o - (o @ a) * a
        if np.linalg.norm(o) < 1e-9:
            raise ValueError("o_des is parallel to a_des")
        object.__setattr__(self, "a_des", a)
        object.__setattr__(self, "o_des", unit(o))
        object.__setattr__(self, "P_hat_x", float(self.P_hat_x))
        object.__setattr__(self, "P_hat_y", float(self.P_hat_y))

    def replace(self, **kw):
        args = dict(a_des=self.a_des, o_des=self.o_des, P_hat_x=self.P_hat_x, P_hat_y=self.P_hat_y)
        args.update(kw)
        return ProbeTarget(**args)


def _cross(a, b):
    # np.cross carries a lot of overhead for single 3-vectors
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def approach_rate(a_curr, a_des, a_des_rate, gains: ControlGains):
    """Angular velocity that turns the approach axis toward ``a_des``."""
    return gains.K_p1 * _cross(a_curr, a_des) + gains.K_p11 * _cross(a_curr, a_des_rate)


def orientation_rate(a_curr, o_curr, o_des, gains: ControlGains):
    """Spin about the current approach axis that turns ``o`` toward ``o_des``."""
    return gains.K_p2 * float(_cross(o_curr, o_des) @ a_curr) * a_curr


def angular_velocity_command(current_pose: RigidTransform, target: ProbeTarget, a_des_rate, gains):
    r = current_pose.rotation
    a_curr, o_curr = r[:, 2], r[:, 0]
    rate = np.zeros(3) if a_des_rate is None else np.asarray(a_des_rate, dtype=float)
    return approach_rate(a_curr, target.a_des, rate, gains) + orientation_rate(a_curr, o_curr, target.o_des, gains)


def linear_velocity_command(current_pose: RigidTransform, target: ProbeTarget, F_z, F_z_rate, gains):
    a_curr = current_pose.rotation[:, 2]
    tip = current_pose.translation
    e_f = gains.F_hat - F_z
    force_term = (gains.K_p3 * e_f - gains.K_d1 * F_z_rate) * a_curr
    lateral = np.array([gains.K_p4 * (target.P_hat_x - tip[0]), gains.K_p5 * (target.P_hat_y - tip[1]), 0.0])
    return lateral + force_term


def assemble_twist(omega, v):
    return np.concatenate([np.asarray(omega, dtype=float), np.asarray(v, dtype=float)])


class StepResult(NamedTuple):
    state: JointState
    pose: RigidTransform  # tip pose the step was computed from
    force: float  # contact force seen at that pose
    joint_limit_hit: bool
    near_singular: bool


def control_step(world, chain, q, target, gains, dt, force_rate=0.0, a_des_rate=None, damping=1e-2, eps=1e-6,
                 pose=None, force=None):
    """One resolved-rate control step.

    ``world`` supplies ``contact_force(pose)``. ``force_rate`` is the measured
    rate of the contact force, used by the derivative term. Callers that
    already hold the current tip pose and force may pass them in.
    """
    if not 0.0 < dt <= 0.1:
        raise ValueError("dt must lie in (0, 0.1] s")
    q = np.asarray(q, dtype=float)
    if pose is None:
        pose = forward_kinematics(chain, q)
    if force is None:
        force = float(world.contact_force(pose))
    omega = angular_velocity_command(pose, target, a_des_rate, gains)
    v = linear_velocity_command(pose, target, force, force_rate, gains)
    sol = solve_joint_velocities(chain, q, assemble_twist(omega, v), gains.K_p6, eps, damping)
    q_new, clipped = chain.clamp(q + dt * sol.dq)
    return StepResult(JointState(q_new, sol.dq), pose, force, clipped, sol.near_singular)


@dataclass
class ProbeController:
    """Stateful wrapper around :func:`control_step` for one world and arm.

    Keeps the previous force sample for the derivative term, the clock, and
    an optional per-step trace.
    """

    world: object
    chain: object
    q: np.ndarray
    gains: ControlGains = field(default_factory=ControlGains)
    dt: float = 0.01
    damping: float = 1e-2
    trace: list | None = None
    t: float = 0.0
    joint_limit_hits: int = 0
    near_singular_steps: int = 0
    _prev_force: float | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).copy()

    def pose(self):
        return forward_kinematics(self.chain, self.q)

    def step(self, target: ProbeTarget, a_des_rate=None, pose=None) -> StepResult:
        """Advance one step. ``pose`` may carry the already computed current tip pose."""
        if pose is None:
            pose = forward_kinematics(self.chain, self.q)
        force = float(self.world.contact_force(pose))
        rate = 0.0 if self._prev_force is None else (force - self._prev_force) / self.dt
        res = control_step(
            self.world, self.chain, self.q, target, self.gains, self.dt,
            force_rate=rate, a_des_rate=a_des_rate, damping=self.damping, pose=pose, force=force,
        )
        if self.trace is not None:
            self.trace.append(trace_row(self.t, self.q, res.pose, res.force))
        self._prev_force = res.force
        self.q = res.state.q
        self.t += self.dt
        self.joint_limit_hits += res.joint_limit_hit
        self.near_singular_steps += res.near_singular
        return res


TRACE_HEADER = (
    ["t"] + [f"q{i + 1}" for i in range(7)]
    + ["tip_x", "tip_y", "tip_z", "a_x", "a_y", "a_z", "o_x", "o_y", "o_z", "F_z"]
)


def trace_row(t, q, pose, force):
    r = pose.rotation
    return [t, *q, *pose.translation, *r[:, 2], *r[:, 0], force]
