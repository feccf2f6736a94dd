"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5]

Both paths are called in one process: the ``*_loop`` kernels are compiled
when numba is available, the ``*_numpy`` ones never are. Set
KIDNEY_PIVOT_DISABLE_NUMBA=1 to see the loop kernels as plain Python
instead (expect them to be very slow).
"""
import argparse
import time

import numpy as np

from kidney_pivot import kernels
from kidney_pivot._jit import NUMBA_ENABLED
from kidney_pivot.geometry import sphere_mesh
from kidney_pivot.kinematics import load_chain
from kidney_pivot.worldsim import Q_SEED


def best_of(fn, repeat):
    fn()  # warm up, includes compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    pts = rng.normal(size=(20000, 3)) * 30.0
    src = rng.normal(size=(2048, 3)) * 30.0
    tgt = rng.normal(size=(2048, 3)) * 30.0
    mesh = sphere_mesh(40.0, subdivisions=5)
    v, f = mesh.vertices, mesh.faces
    origin = np.zeros(3)
    normal = np.array([0.3, 0.2, 0.93])
    normal /= np.linalg.norm(normal)
    seg3 = kernels.plane_segments_numpy(v, f, origin, normal)
    e1 = np.cross(normal, [1.0, 0.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    seg2 = np.ascontiguousarray(np.stack([seg3 @ e1, seg3 @ e2], axis=-1))
    lo = seg2.reshape(-1, 2).min(axis=0)
    nu, nw = (np.ceil((seg2.reshape(-1, 2).max(axis=0) - lo) / 0.25).astype(int) + 1)
    n_vox = 90
    vorigin = np.full(3, -45.0)
    ref = np.ones((n_vox, n_vox, n_vox), dtype=bool)
    idx = np.ascontiguousarray(np.floor((rng.normal(size=(30000, 3)) * 15.0 + 45.0)).astype(np.int64)).clip(0, n_vox - 1)

    def cover(fn):
        return lambda: fn(idx, ref, np.zeros_like(ref))

    return [
        ("nearest 2048x2048", lambda: kernels.nearest_indices_loop(src, tgt), lambda: kernels.nearest_indices_numpy(src, tgt)),
        ("farthest point 20000->1000", lambda: kernels.farthest_point_loop(pts, 1000, 0),
         lambda: kernels.farthest_point_numpy(pts, 1000, 0)),
        (f"plane slice ({len(f)} faces)", lambda: kernels.plane_segments_loop(v, f, origin, normal),
         lambda: kernels.plane_segments_numpy(v, f, origin, normal)),
        ("even-odd fill", lambda: kernels.fill_even_odd_loop(seg2, lo[0], lo[1], 0.25, nu, nw),
         lambda: kernels.fill_even_odd_numpy(seg2, lo[0], lo[1], 0.25, nu, nw)),
        ("voxelize sphere 1 mm", lambda: kernels.parity_voxelize_loop(v, f, vorigin, 1.0, n_vox, n_vox, n_vox, 1e-4, 2e-4),
         lambda: kernels.parity_voxelize_numpy(v, f, vorigin, 1.0, n_vox, n_vox, n_vox, 1e-4, 2e-4)),
        ("dilated coverage 30000 pts", cover(kernels.cover_dilated_loop), cover(kernels.cover_dilated_numpy)),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"numba enabled: {NUMBA_ENABLED}")
    print(f"{'kernel':30s} {'loop ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, loop, vec in cases(rng):
        a = best_of(loop, args.repeat)
        b = best_of(vec, args.repeat)
        print(f"{name:30s} {a * 1e3:10.2f} {b * 1e3:10.2f} {b / a:8.1f}")

    chain = load_chain()
    twist = np.array([0.01, -0.02, 0.0, 1.0, 2.0, -0.5])
    q = np.asarray(Q_SEED, dtype=float)

    def call(fn):
        return lambda: fn(chain._home, chain.body_screws, q, twist, 0.5, 1e-6, 1e-2, chain._rows, chain.length_scale)

    jitted = kernels.resolve_rates
    plain = getattr(jitted, "py_func", jitted)
    a = best_of(call(jitted), args.repeat)
    b = best_of(call(plain), args.repeat)
    print(f"{'resolve rates (one step)':30s} {a * 1e3:10.3f} {b * 1e3:10.3f} {b / a:8.1f}")


if __name__ == "__main__":
    main()
