"""Serial-chain kinematics for the probe-holding arm.

Joint motions are screws in the product-of-exponentials form. The chain
stores them in the end-effector (body) frame, which makes the Jacobian a
backward recursion over the joints. Twists are ordered (angular, linear)
and expressed in base axes with the linear part taken at the probe tip.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import ConfigError
from .geometry import RigidTransform, project_to_rotation

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


@dataclass(frozen=True, eq=False)
class KinematicChain:
    """Revolute chain given by base-frame joint axes at the zero configuration.

    ``length_scale`` divides the linear Jacobian rows before the
    manipulability determinant so that angular and linear rows have
    comparable magnitude; ``manipulability_rows`` picks the rows used.
    """

    axes: np.ndarray
    points: np.ndarray
    home_pose: RigidTransform
    joint_limits: np.ndarray
    manipulability_rows: tuple = (0, 1, 2, 3, 4, 5)
    length_scale: float = 1.0
    name: str = "chain"
    body_screws: np.ndarray = field(init=False, repr=False)
    _home: np.ndarray = field(init=False, repr=False)
    _rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        axes = np.asarray(self.axes, dtype=float).reshape(-1, 3)
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        lim = np.asarray(self.joint_limits, dtype=float).reshape(-1, 2)
        if not (len(axes) == len(pts) == len(lim)) or len(axes) == 0:
            raise ValueError("axes, points and limits must have one entry per joint")
        if np.any(np.abs(np.linalg.norm(axes, axis=1) - 1.0) > 1e-9):
            raise ValueError("joint axes must be unit length")
        if np.any(lim[:, 0] > lim[:, 1]):
            raise ValueError("joint limits must be (min, max)")
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")
        home = self.home_pose.as_matrix()
        r, p = home[:3, :3], home[:3, 3]
        # space screw S = (w, -w x point), moved into the home end-effector frame
        body = np.empty((len(axes), 6))
        for i, (w, a) in enumerate(zip(axes, pts)):
            v = -np.cross(w, a)
            body[i, :3] = r.T @ w
            body[i, 3:] = r.T @ (v - np.cross(p, w))
        for name, val in (("axes", axes), ("points", pts), ("joint_limits", lim)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "body_screws", body)
        object.__setattr__(self, "_home", np.ascontiguousarray(home))
        object.__setattr__(self, "_rows", np.asarray(self.manipulability_rows, dtype=np.int64))

    @property
    def dof(self):
        return len(self.axes)

    def clamp(self, q):
        """Clip q into the joint limits; also report whether clipping happened."""
        qc = np.clip(q, self.joint_limits[:, 0], self.joint_limits[:, 1])
        return qc, bool(np.any(qc != q))

    def with_options(self, **kw):
        args = dict(
            axes=self.axes,
            points=self.points,
            home_pose=self.home_pose,
            joint_limits=self.joint_limits,
            manipulability_rows=self.manipulability_rows,
            length_scale=self.length_scale,
            name=self.name,
        )
        args.update(kw)
        return KinematicChain(**args)


@dataclass
class JointState:
    q: np.ndarray
    dq: np.ndarray

    @classmethod
    def at_rest(cls, q):
        q = np.asarray(q, dtype=float)
        return cls(q.copy(), np.zeros_like(q))


class SolveResult(NamedTuple):
    dq: np.ndarray
    manipulability: float
    near_singular: bool


# ---------------------------------------------------------------------------
# chain files

_JOINT_KEYS = {"axis", "point", "limits"}
_TOP_KEYS = {"schema", "name", "length_scale", "manipulability_rows", "home", "joint"}


def chain_from_dict(data, require_dof=7) -> KinematicChain:
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown chain keys: {sorted(unknown)}")
    if data.get("schema", 1) != 1:
        raise ConfigError(f"unsupported chain schema {data.get('schema')}")
    joints = data.get("joint", [])
    if require_dof is not None and len(joints) != require_dof:
        raise ConfigError(f"expected {require_dof} joints, found {len(joints)}")
    for j in joints:
        if set(j) != _JOINT_KEYS:
            raise ConfigError(f"joint entries need exactly {sorted(_JOINT_KEYS)}")
    home = data["home"]
    try:
        return KinematicChain(
            axes=[j["axis"] for j in joints],
            points=[j["point"] for j in joints],
            home_pose=RigidTransform(np.array(home["rotation"], float), np.array(home["translation"], float)),
            joint_limits=[j["limits"] for j in joints],
            manipulability_rows=tuple(data.get("manipulability_rows", (0, 1, 2, 3, 4, 5))),
            length_scale=float(data.get("length_scale", 1.0)),
            name=str(data.get("name", "chain")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_chain(path=None) -> KinematicChain:
    """Load a chain file; ``None`` loads the bundled default arm."""
    if path is None:
        text = resources.files("kidney_pivot").joinpath("data/default_arm.toml").read_text()
    else:
        text = Path(path).read_text()
    return chain_from_dict(tomllib.loads(text))


def planar_2r(l1=1000.0, l2=1000.0) -> KinematicChain:
    """Planar two-link rig in the base x-y plane; manipulability uses the x, y rows."""
    return KinematicChain(
        axes=[[0, 0, 1], [0, 0, 1]],
        points=[[0, 0, 0], [l1, 0, 0]],
        home_pose=RigidTransform(np.eye(3), np.array([l1 + l2, 0.0, 0.0])),
        joint_limits=[[-math.pi, math.pi]] * 2,
        manipulability_rows=(3, 4),
        length_scale=1.0,
        name="planar-2r",
    )


# ---------------------------------------------------------------------------
# operations


def _q(chain, q):
    q = np.ascontiguousarray(q, dtype=float)
    if q.shape != (chain.dof,):
        raise ValueError(f"expected {chain.dof} joint values, got shape {q.shape}")
    return q


def forward_kinematics(chain: KinematicChain, q) -> RigidTransform:
    m = kernels.chain_pose(chain._home, chain.body_screws, _q(chain, q))
    return RigidTransform(project_to_rotation(m[:3, :3]), m[:3, 3].copy())


def space_jacobian(chain: KinematicChain, q):
    """6 x n Jacobian mapping joint rates to (omega, tip velocity) in base axes."""
    q = _q(chain, q)
    pose = kernels.chain_pose(chain._home, chain.body_screws, q)
    return kernels.hybrid_jacobian(pose, kernels.body_jacobian(chain.body_screws, q))


def manipulability(chain: KinematicChain, q):
    jb = kernels.body_jacobian(chain.body_screws, _q(chain, q))
    return float(kernels.manipulability_from_body(jb, chain._rows, chain.length_scale))


def manipulability_gradient(chain: KinematicChain, q, eps=1e-6):
    if not eps > 0:
        raise ValueError("eps must be positive")
    _, g = kernels.manipulability_and_gradient(chain.body_screws, _q(chain, q), chain._rows, chain.length_scale, eps)
    return g


def solve_joint_velocities(chain, q, twist, null_gain=0.5, eps=1e-6, damping=1e-2, singular_threshold=1e-4):
    """Resolved rates with a manipulability-ascent null-space term.

    dq = J+ xi + (I - J+ J) null_gain grad m, with J+ the damped least-squares
    inverse. The returned flag marks configurations whose manipulability is
    below ``singular_threshold``.
    """
    q = _q(chain, q)
    twist = np.ascontiguousarray(twist, dtype=float)
    dq, m = kernels.resolve_rates(
        chain._home, chain.body_screws, q, twist, float(null_gain), float(eps), float(damping),
        chain._rows, chain.length_scale,
    )
    return SolveResult(dq, float(m), bool(m < singular_threshold))


def pose_error(current: RigidTransform, target: RigidTransform):
    """6-vector (rotation vector, position error) taking current to target, base axes."""
    r = target.rotation @ current.rotation.T
    ang = math.atan2(
        0.5 * math.sqrt(max(0.0, (r[2, 1] - r[1, 2]) ** 2 + (r[0, 2] - r[2, 0]) ** 2 + (r[1, 0] - r[0, 1]) ** 2)),
        0.5 * (np.trace(r) - 1.0),
    )
    axis_raw = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    nrm = np.linalg.norm(axis_raw)
    if nrm > 1e-12:
        rotvec = ang * axis_raw / nrm
    elif ang < 1e-6:
        rotvec = np.zeros(3)
    else:  # half turn: axis from the symmetric part
        b = (r + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(b)))
        rotvec = math.pi * b[:, k] / math.sqrt(b[k, k])
    return np.concatenate([rotvec, target.translation - current.translation])


def inverse_kinematics(chain, target: RigidTransform, q0, tol_mm=1e-4, tol_rad=1e-6, max_iters=500, damping=1.0):
    """Damped Newton iterations toward a target tip pose.

    Returns ``(q, converged)``. The result is clamped to the joint limits at
    every step, so an unreachable target ends at the nearest reachable
    configuration found.
    """
    q = chain.clamp(np.asarray(q0, dtype=float))[0]
    for _ in range(max_iters):
        e = pose_error(forward_kinematics(chain, q), target)
        if np.linalg.norm(e[:3]) < tol_rad and np.linalg.norm(e[3:]) < tol_mm:
            return q, True
        # weight rotation in the same units as 100 mm of travel
        w = np.array([100.0] * 3 + [1.0] * 3)
        j = space_jacobian(chain, q) * w[:, None]
        jt = j.T
        step = jt @ np.linalg.solve(j @ jt + damping * np.eye(6), e * w)
        scale = min(1.0, 0.3 / max(np.max(np.abs(step)), 1e-300))
        q = chain.clamp(q + scale * step)[0]
    e = pose_error(forward_kinematics(chain, q), target)
    return q, bool(np.linalg.norm(e[:3]) < tol_rad and np.linalg.norm(e[3:]) < tol_mm)

