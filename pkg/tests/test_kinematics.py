import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_rotation
from kidney_pivot.errors import ConfigError
from kidney_pivot.geometry import RigidTransform, rot_z
from kidney_pivot.kinematics import (
    KinematicChain,
    chain_from_dict,
    forward_kinematics,
    inverse_kinematics,
    load_chain,
    manipulability,
    manipulability_gradient,
    planar_2r,
    pose_error,
    solve_joint_velocities,
    space_jacobian,
)
from kidney_pivot.worldsim import Q_SEED


def fd_jacobian(chain, q, h=1e-6):
    cols = []
    for i in range(chain.dof):
        dq = np.zeros(chain.dof)
        dq[i] = h
        a = forward_kinematics(chain, q - dq)
        b = forward_kinematics(chain, q + dq)
        cols.append(pose_error(a, b) / (2 * h))
    return np.column_stack(cols)


def random_q(chain, rng, margin=0.2):
    lo, hi = chain.joint_limits[:, 0] + margin, chain.joint_limits[:, 1] - margin
    return rng.uniform(lo, hi)


def test_home_at_zero(chain):
    pose = forward_kinematics(chain, np.zeros(7))
    np.testing.assert_allclose(pose.as_matrix(), chain.home_pose.as_matrix(), atol=1e-12)


def test_single_joint_rig():
    home = RigidTransform(rot_z(0.2), (100.0, 0.0, 50.0))
    rig = KinematicChain([[0, 0, 1]], [[0, 0, 0]], home, [[-4, 4]])
    pose = forward_kinematics(rig, [math.pi / 2])
    np.testing.assert_allclose(pose.rotation, rot_z(math.pi / 2) @ home.rotation, atol=1e-12)
    np.testing.assert_allclose(pose.translation, (0.0, 100.0, 50.0), atol=1e-9)


def test_fk_matches_path_integration(chain, rng):
    q = random_q(chain, rng)
    steps = 10_000  # step 1e-4 of the path parameter
    p = chain.home_pose.translation.copy()
    for s in np.arange(steps) / steps:
        qm = (s + 0.5 / steps) * q
        p += space_jacobian(chain, qm)[3:] @ (q / steps)
    np.testing.assert_allclose(p, forward_kinematics(chain, q).translation, atol=1e-3)


def test_jacobian_matches_finite_differences(chain, rng):
    for _ in range(10):
        q = random_q(chain, rng)
        np.testing.assert_allclose(space_jacobian(chain, q), fd_jacobian(chain, q), atol=1e-5)


def test_planar_2r_closed_form():
    rig = planar_2r(1000.0, 1000.0)
    q = np.array([0.0, math.pi / 2])
    j = space_jacobian(rig, q)
    l1 = l2 = 1000.0
    s1, c1, s12, c12 = 0.0, 1.0, 1.0, 0.0
    expected = np.array([[-l1 * s1 - l2 * s12, -l2 * s12], [l1 * c1 + l2 * c12, l2 * c12]])
    np.testing.assert_allclose(j[3:5], expected, atol=1e-9)
    np.testing.assert_allclose(j @ np.zeros(2), 0.0)


def test_planar_2r_manipulability():
    rig = planar_2r()
    assert manipulability(rig, [0.3, math.pi / 2]) == pytest.approx(1e6, rel=1e-9)
    assert manipulability(rig, [0.3, 0.0]) == pytest.approx(0.0, abs=1e-9)


def test_manipulability_base_rotation_invariant(chain, rng):
    q = random_q(chain, rng)
    m = manipulability(chain, q)
    for _ in range(10):
        r = RigidTransform(random_rotation(rng), rng.normal(size=3) * 100)
        moved = chain.with_options(
            axes=chain.axes @ r.rotation.T, points=r.apply(chain.points), home_pose=r @ chain.home_pose
        )
        assert manipulability(moved, q) == pytest.approx(m, rel=1e-9)


def test_gradient_at_grid_maximum():
    rig = planar_2r()
    grid = np.linspace(0.01, math.pi - 0.01, 2001)
    best = grid[np.argmax([manipulability(rig, [0.0, g]) for g in grid])]
    eps = 1e-6
    g = manipulability_gradient(rig, [0.0, best], eps)
    # the forward difference is biased by m'' eps / 2 = 1e6 eps / 2
    assert np.linalg.norm(g) / 1e6 < 10 * eps + abs(best - math.pi / 2)


def test_gradient_first_joint_is_zero_on_2r():
    rig = planar_2r()
    assert abs(manipulability_gradient(rig, [0.7, 1.1])[0]) < 1e-9


def test_gradient_matches_central_difference(chain, rng):
    eps = 1e-6
    for _ in range(10):
        q = random_q(chain, rng)
        g = manipulability_gradient(chain, q, eps)
        h = eps / 10
        c = np.array([(manipulability(chain, q + h * e) - manipulability(chain, q - h * e)) / (2 * h)
                      for e in np.eye(7)])
        big = np.abs(c) > 1e-3
        assert np.all(np.abs(g[big] - c[big]) <= 0.05 * np.abs(c[big]))


def test_solve_zero_twist_zero_gradient():
    rig = planar_2r()
    res = solve_joint_velocities(rig, [0.0, math.pi / 2], np.zeros(6), null_gain=0.0)
    np.testing.assert_allclose(res.dq, 0.0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_solve_tracks_twist_exactly(seed):
    chain = load_chain()
    rng = np.random.default_rng(seed)
    q = random_q(chain, rng)
    twist = rng.normal(size=6) * np.array([0.1] * 3 + [20.0] * 3)
    res = solve_joint_velocities(chain, q, twist, null_gain=0.0, damping=0.0)
    if res.manipulability > 1e-3:
        assert np.linalg.norm(space_jacobian(chain, q) @ res.dq - twist) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_null_space_motion_has_no_twist(seed):
    chain = load_chain()
    rng = np.random.default_rng(seed)
    q = random_q(chain, rng)
    res = solve_joint_velocities(chain, q, np.zeros(6), null_gain=0.5, damping=0.0)
    assert np.linalg.norm(space_jacobian(chain, q) @ res.dq) < 1e-6


def test_null_space_ascent(chain, rng):
    q = random_q(chain, rng)
    m_prev = manipulability(chain, q)
    for _ in range(200):
        q = q + 1e-3 * solve_joint_velocities(chain, q, np.zeros(6), null_gain=5.0, damping=0.0).dq
        m = manipulability(chain, q)
        assert m >= m_prev - 1e-9
        m_prev = m


def test_near_singular_flag():
    rig = planar_2r()
    assert solve_joint_velocities(rig, [0.0, 1e-12], np.zeros(6)).near_singular
    assert not solve_joint_velocities(rig, [0.0, 1.0], np.zeros(6), singular_threshold=1.0).near_singular


def test_fk_rotation_stays_orthonormal(chain, rng):
    for _ in range(20):
        assert forward_kinematics(chain, random_q(chain, rng, 0.0)).is_valid()


def test_ik_round_trip(chain, rng):
    for _ in range(5):
        q_true = np.asarray(Q_SEED) + rng.normal(size=7) * 0.2
        target = forward_kinematics(chain, q_true)
        q, ok = inverse_kinematics(chain, target, Q_SEED)
        assert ok
        e = pose_error(forward_kinematics(chain, q), target)
        assert np.linalg.norm(e[3:]) < 1e-3


def test_chain_file_validation(chain):
    good = {
        "home": {"rotation": np.eye(3).tolist(), "translation": [0, 0, 0]},
        "joint": [{"axis": [0, 0, 1], "point": [0, 0, 0], "limits": [-1, 1]}] * 7,
    }
    assert chain_from_dict(good).dof == 7
    with pytest.raises(ConfigError):
        chain_from_dict({**good, "colour": "red"})
    with pytest.raises(ConfigError):
        chain_from_dict({**good, "joint": good["joint"][:6]})
    with pytest.raises(ConfigError):
        chain_from_dict({**good, "joint": [{"axis": [0, 0, 2], "point": [0, 0, 0], "limits": [-1, 1]}] * 7})
    assert chain.dof == 7 and chain.name
