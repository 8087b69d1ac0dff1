"""numba switch.

Hot loops are written twice: an ``@njit`` kernel and a vectorized numpy
fallback.  Set ``MCSE_NUMBA=0`` to force the numpy path (also used when
numba is not importable).
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("MCSE_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when numba is installed, else a no-op decorator.

    The numba variant is compiled whenever numba exists so the benchmark can
    compare both paths; ``USE_NUMBA`` only decides which one callers get.
    """
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    return numba.njit(*args, **kwargs)
