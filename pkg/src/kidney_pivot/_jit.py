"""Optional numba acceleration.

Hot kernels are decorated with :func:`jit`. Setting the environment variable
``KIDNEY_PIVOT_DISABLE_NUMBA=1`` (or running without numba installed) leaves
them as plain Python, and the dispatchers in :mod:`kidney_pivot.kernels`
switch to their vectorized numpy counterparts.
"""
import os

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_flag = os.environ.get("KIDNEY_PIVOT_DISABLE_NUMBA", "").strip().lower()
NUMBA_ENABLED = HAVE_NUMBA and _flag in ("", "0", "false", "no")


def jit(func):
    if NUMBA_ENABLED:
        return njit(cache=True)(func)
    return func
