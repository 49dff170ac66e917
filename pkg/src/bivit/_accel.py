"""Optional numba acceleration.

Kernels in this package are written twice: a numba ``@njit`` version and a
pure-numpy fallback. The numba path is used when numba imports cleanly and
``BIVIT_DISABLE_NUMBA`` is unset (or ``0``). Both paths are exact integer
arithmetic, so switching backends never changes results.
"""

import os

_FLAG = os.environ.get("BIVIT_DISABLE_NUMBA", "0").strip().lower()
NUMBA_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled by BIVIT_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


__all__ = ["HAVE_NUMBA", "NUMBA_DISABLED", "njit"]
