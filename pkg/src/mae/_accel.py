"""Optional numba acceleration.

Set ``MAE_DISABLE_NUMBA=1`` to force the pure-numpy code paths.
"""
import os

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("MAE_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")


def njit(func):
    """Compile ``func`` with numba when available, otherwise return it unchanged."""
    if HAVE_NUMBA:
        return numba.njit(cache=True)(func)
    return func
