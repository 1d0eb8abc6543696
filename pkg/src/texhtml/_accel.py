"""Optional numba acceleration.

Kernels are written as plain Python over numpy arrays and wrapped with
:func:`kernel`.  When numba is importable and ``TEXHTML_DISABLE_JIT`` is not
set to a truthy value, they are compiled with ``@njit``; otherwise the same
function runs as-is.  The pure version of every kernel stays reachable as
``fn.py_func`` so benchmarks can compare both paths in one process.
"""

from __future__ import annotations

import os

_FLAG = "TEXHTML_DISABLE_JIT"


def _jit_requested() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() not in {"1", "true", "yes", "on"}


try:
    if not _jit_requested():
        raise ImportError("jit disabled by environment")
    from numba import njit as _njit
except ImportError:
    _njit = None

BACKEND = "numba" if _njit is not None else "python"


def kernel(fn):
    if _njit is None:
        fn.py_func = fn
        return fn
    return _njit(cache=True, nogil=True)(fn)
