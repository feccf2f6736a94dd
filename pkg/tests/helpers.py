"""Shared builders for the test suite."""
import numpy as np

from kidney_pivot.geometry import axis_angle, ellipsoid_mesh, sample_surface


def ellipsoid_cloud(semi_axes, n=3000, seed=0):
    return sample_surface(ellipsoid_mesh(semi_axes, subdivisions=4), n, np.random.default_rng(seed))


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis_angle(axis, rng.uniform(0, max_angle))


def brute_nearest(source, target):
    d = ((target[:, None, :] - source[None, :, :]) ** 2).sum(-1)
    return np.argmin(d, axis=1)  # argmin keeps the lowest index on ties
