"""Numba dispatch.

Every hot kernel in the package exists twice: a numba ``@njit`` version and a
pure-numpy version. ``USE_JIT`` picks which one the public functions call. Set
``TURNREG_DISABLE_JIT=1`` (or have numba missing) to run the numpy path.
"""
import os

try:
    import numba
    from numba import njit, prange

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f

    prange = range


def _flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


USE_JIT = NUMBA_AVAILABLE and not _flag("TURNREG_DISABLE_JIT")


def backend_name():
    return "numba" if USE_JIT else "numpy"


def pick(jit_impl, numpy_impl):
    """Return the implementation matching the active backend."""
    return jit_impl if USE_JIT else numpy_impl


__all__ = ["NUMBA_AVAILABLE", "USE_JIT", "njit", "prange", "pick", "backend_name"]
