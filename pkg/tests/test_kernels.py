"""The compiled loop kernels and their numpy twins must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import brute_nearest, random_rotation
from kidney_pivot import _jit, kernels
from kidney_pivot.geometry import box_mesh, ellipsoid_mesh, sphere_mesh, voxel_volume

coords = st.floats(-100, 100, allow_nan=False, width=64)


def test_public_names_follow_the_switch():
    expected = kernels.nearest_indices_loop if _jit.NUMBA_ENABLED else kernels.nearest_indices_numpy
    assert kernels.nearest_indices is expected


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)), elements=coords),
       arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)), elements=coords))
def test_nearest_twins(src, tgt):
    ref = brute_nearest(src, tgt)
    assert np.array_equal(kernels.nearest_indices_loop(src, tgt), ref)
    assert np.array_equal(kernels.nearest_indices_numpy(src, tgt), ref)


def test_nearest_twins_with_ties():
    src = np.array([[0.0, 0, 0], [2.0, 0, 0], [0.0, 0, 0]])
    tgt = np.array([[1.0, 0, 0], [0.0, 0, 0]])
    assert list(kernels.nearest_indices_loop(src, tgt)) == [0, 0]
    assert list(kernels.nearest_indices_numpy(src, tgt)) == [0, 0]


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2**31 - 1))
def test_farthest_point_twins(n, seed):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    k = max(1, n // 3)
    a = kernels.farthest_point_loop(pts, k, 0)
    b = kernels.farthest_point_numpy(pts, k, 0)
    assert np.array_equal(a, b)
    assert len(set(a.tolist())) == k


@pytest.mark.parametrize("seed", range(10))
def test_plane_segments_twins(seed):
    rng = np.random.default_rng(seed)
    mesh = ellipsoid_mesh((50, 25, 15), subdivisions=3)
    normal = random_rotation(rng)[:, 0]
    origin = rng.normal(size=3) * 10
    a = kernels.plane_segments_loop(mesh.vertices, mesh.faces, origin, normal)
    b = kernels.plane_segments_numpy(mesh.vertices, mesh.faces, origin, normal)
    np.testing.assert_allclose(a, b, atol=1e-12)
    if len(a):
        assert np.abs((a.reshape(-1, 3) - origin) @ normal).max() < 1e-9


def _polygon_segments(rng, n=12):
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = rng.uniform(5, 20, n)
    p = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
    return np.ascontiguousarray(np.stack([p, np.roll(p, -1, axis=0)], axis=1))


@pytest.mark.parametrize("seed", range(10))
def test_fill_even_odd_twins(seed):
    rng = np.random.default_rng(seed)
    seg = _polygon_segments(rng)
    h = rng.uniform(0.2, 1.0)
    lo = seg.reshape(-1, 2).min(axis=0)
    nu, nw = (np.ceil((seg.reshape(-1, 2).max(axis=0) - lo) / h).astype(int) + 1)
    a = kernels.fill_even_odd_loop(seg, lo[0], lo[1], h, nu, nw)
    b = kernels.fill_even_odd_numpy(seg, lo[0], lo[1], h, nu, nw)
    assert np.array_equal(a, b)


def test_fill_square_area():
    sq = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], dtype=float)
    seg = np.ascontiguousarray(np.stack([sq, np.roll(sq, -1, axis=0)], axis=1))
    for fn in (kernels.fill_even_odd_loop, kernels.fill_even_odd_numpy):
        assert fn(seg, 0.0, 0.0, 0.5, 20, 20).sum() == 400


@pytest.mark.parametrize("mesh", [box_mesh((10, 12, 8), (0.3, 0.2, 0.1)), sphere_mesh(12, (1, 2, 3), 3)])
def test_voxelize_twins(mesh):
    origin = np.floor(mesh.vertices.min(axis=0)) - 1.0
    shape = (np.ceil(mesh.vertices.max(axis=0) - origin) + 1).astype(int)
    args = (mesh.vertices, mesh.faces, origin, 1.0, *map(int, shape), 1.4e-7, 1.7e-7)
    assert np.array_equal(kernels.parity_voxelize_loop(*args), kernels.parity_voxelize_numpy(*args))


@settings(max_examples=40, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(0, 80), st.just(3)), elements=st.integers(-3, 12)),
       st.integers(0, 2**31 - 1))
def test_cover_dilated_twins(idx, seed):
    ref = np.random.default_rng(seed).random((10, 9, 8)) < 0.6
    ca = np.zeros_like(ref)
    cb = np.zeros_like(ref)
    na = kernels.cover_dilated_loop(idx, ref, ca)
    nb = kernels.cover_dilated_numpy(idx, ref, cb)
    assert na == nb == int(ca.sum())
    assert np.array_equal(ca, cb)
    assert not np.any(ca & ~ref)


def test_cover_dilated_counts_only_new():
    ref = np.ones((5, 5, 5), dtype=bool)
    cov = np.zeros_like(ref)
    idx = np.array([[2, 2, 2]])
    assert kernels.cover_dilated(idx, ref, cov) == 27
    assert kernels.cover_dilated(idx, ref, cov) == 0


def test_numpy_path_subprocess():
    """Run a small pipeline with numba switched off and compare to this process."""
    code = (
        "import numpy as np;"
        "from kidney_pivot import kernels;"
        "from kidney_pivot.geometry import sphere_mesh, voxel_volume;"
        "assert kernels.nearest_indices is kernels.nearest_indices_numpy;"
        "print(voxel_volume(sphere_mesh(10, subdivisions=3)).count)"
    )
    env = {**os.environ, "KIDNEY_PIVOT_DISABLE_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert int(out.stdout.strip()) == voxel_volume(sphere_mesh(10, subdivisions=3)).count
