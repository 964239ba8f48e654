"""Numba switch for the pixel-level kernels.

Set ``CHARANIM_DISABLE_NUMBA=1`` to force the pure-numpy paths (also used
automatically when numba is not importable).
"""
import os

_DISABLED = os.environ.get("CHARANIM_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    njit = None
    HAVE_NUMBA = False


def jit(fn):
    """``njit(cache=True)`` when numba is active, otherwise ``None``."""
    if not HAVE_NUMBA:
        return None
    return njit(cache=True)(fn)
