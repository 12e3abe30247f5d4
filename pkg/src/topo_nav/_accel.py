"""Kernel backend selection.

Hot loops in :mod:`topo_nav.kernels` exist twice: an explicit-loop version
compiled with ``numba.njit`` and a vectorised NumPy version.  The compiled
path is the default; ``TOPO_NAV_NUMBA=0`` selects the NumPy path.
"""
from __future__ import annotations

import os

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("TOPO_NAV_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def compile_loop(fn):
    """Compiled version of ``fn``, or ``None`` when numba is unavailable."""
    if not HAVE_NUMBA:
        return None
    return _numba.njit(cache=True)(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
