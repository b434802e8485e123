"""Numba switch for the hot kernels.

Kernels in :mod:`vcnn.kernels` are compiled with numba when it is importable
and ``VCNN_DISABLE_NUMBA`` is unset (or ``0``). Otherwise every kernel falls
back to a vectorised numpy implementation with identical semantics.
"""

import os

_flag = os.environ.get("VCNN_DISABLE_NUMBA", "0").strip().lower()
DISABLED = _flag not in ("", "0", "false", "no")

# the TBB layer shipped with some numba wheels is too old and only warns
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    if DISABLED:
        raise ImportError("numba disabled by VCNN_DISABLE_NUMBA")
    import numba as nb

    HAS_NUMBA = True
except ImportError:
    nb = None
    HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when acceleration is on, identity decorator otherwise."""
    if HAS_NUMBA:
        kwargs.setdefault("cache", True)
        return nb.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def set_threads(n):
    """Cap numba worker threads. No-op without numba."""
    if HAS_NUMBA and n is not None:
        nb.set_num_threads(max(1, min(int(n), nb.config.NUMBA_NUM_THREADS)))


def backend():
    return "numba" if HAS_NUMBA else "numpy"
