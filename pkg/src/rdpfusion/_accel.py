"""Numba switch.

Set ``RDPFUSION_NO_NUMBA=1`` to force the pure-numpy kernels. When numba
is missing the numpy path is used silently.
"""

import os

_DISABLED = os.environ.get("RDPFUSION_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    import numba as _nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    _nb = None
    HAVE_NUMBA = False


def use_numba():
    return HAVE_NUMBA


def njit(fn):
    """``numba.njit(cache=True)`` when available, else the function unchanged."""
    if _nb is None:
        return fn
    return _nb.njit(cache=True, nogil=True)(fn)
