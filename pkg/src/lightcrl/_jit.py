"""Select between numba-compiled kernels and the pure-numpy fallback.

Set ``LIGHTCRL_DISABLE_NUMBA=1`` before import to force the numpy path.
The numpy path is also used when numba is not installed.
"""

import os

_FLAG = "LIGHTCRL_DISABLE_NUMBA"


def _env_disabled():
    return os.environ.get(_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


try:
    import numba as _numba
except ImportError:  # pragma: no cover - exercised only without numba
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def njit(func):
    """Compile ``func`` in nopython mode when numba is importable, else return it unchanged."""
    if _numba is None:
        return func
    return _numba.njit(cache=True, nogil=True)(func)
