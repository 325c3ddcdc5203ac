"""Optional numba acceleration.

Hot kernels are decorated with :func:`maybe_njit`. Setting the environment
variable ``EMTK_DISABLE_NUMBA=1`` (or missing numba) selects the pure-Python
fallback path; both paths execute the same source, so results are identical.
"""
from __future__ import annotations

import os

_DISABLED = os.environ.get("EMTK_DISABLE_NUMBA", "").lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError("numba disabled via EMTK_DISABLE_NUMBA")
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False
    _njit = None


def maybe_njit(*args, **kwargs):
    """``numba.njit`` when acceleration is on, identity decorator otherwise."""
    if HAVE_NUMBA:
        return _njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]

    def wrap(func):
        return func

    return wrap
