"""Optional numba acceleration.

Set ``DIARKIT_DISABLE_NUMBA=1`` to force the pure-numpy code paths, even
when numba is importable.  The flag is read once, at import time.
"""

import logging
import os

logger = logging.getLogger(__name__)

_DISABLED = os.environ.get("DIARKIT_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _DISABLED:
        raise ImportError("disabled by DIARKIT_DISABLE_NUMBA")
    import numba

    HAVE_NUMBA = True
except ImportError as exc:
    numba = None
    HAVE_NUMBA = False
    logger.debug("numba unavailable (%s); using numpy kernels", exc)


def jit_or_none(func):
    """Compile ``func`` with ``numba.njit``; ``None`` when numba is off."""
    if not HAVE_NUMBA:
        return None
    return numba.njit(cache=True)(func)
