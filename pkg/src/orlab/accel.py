"""Numba JIT switch.

Hot kernels live in :mod:`orlab.kernels` in two flavours: a numba
``@njit`` build and a pure-numpy twin. Which one the package uses is
decided here, once, at import time:

* ``ORLAB_DISABLE_NUMBA=1`` forces the numpy fallback,
* a missing/broken numba install falls back silently.

``benchmarks/bench_oracle.py`` compares both builds head to head.
"""

import os

__all__ = ["NUMBA_ENABLED", "maybe_njit"]


def _env_disabled() -> bool:
    return os.getenv("ORLAB_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


NUMBA_ENABLED = False
_njit = None

if not _env_disabled():
    try:
        from numba import njit as _njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - exercised via env flag instead
        _njit = None
        NUMBA_ENABLED = False


def maybe_njit(func):
    """Return a JIT-compiled build of ``func``, or ``func`` itself when disabled."""
    if NUMBA_ENABLED:
        return _njit(cache=True)(func)
    return func
