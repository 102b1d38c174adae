"""Numba switch.

Set ``MMDRESTORE_DISABLE_JIT=1`` before import to run every hot kernel on
its pure-numpy path. Numba being absent has the same effect.
"""

import os

_DISABLE = os.environ.get("MMDRESTORE_DISABLE_JIT", "0").strip().lower() in ("1", "true", "yes", "on")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLE

numba_default = {
    "nogil": True,
    "cache": True,
    "fastmath": False,
    "boundscheck": False,
    "error_model": "numpy",
}


def njit(fn):
    """Compile ``fn`` with the default settings, or return None without numba."""
    if not HAVE_NUMBA:
        return None
    return numba.njit(**numba_default)(fn)
