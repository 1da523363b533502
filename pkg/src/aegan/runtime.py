"""Process-level performance knobs."""

from __future__ import annotations

import ctypes
import ctypes.util
import logging
import os

log = logging.getLogger(__name__)

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_tuned = False


def tune_allocator() -> bool:
    """Keep freed activation buffers in the glibc heap instead of unmapping them.

    Large numpy temporaries otherwise go through mmap/munmap on every op and pay
    first-touch page faults each time, which dominates conv cost on some hosts.
    Returns True when the tuning was applied.
    """
    global _tuned
    if _tuned:
        return True
    name = ctypes.util.find_library("c")
    if not name or os.name != "posix":
        return False
    try:
        libc = ctypes.CDLL(name)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30) and libc.mallopt(_M_TRIM_THRESHOLD, 1 << 31)
    except (OSError, AttributeError):
        return False
    _tuned = bool(ok)
    log.debug("allocator tuning applied: %s", _tuned)
    return _tuned


def thread_limit() -> int | None:
    """Worker bound from AEGAN_THREADS, if set."""
    value = os.environ.get("AEGAN_THREADS")
    return int(value) if value else None


_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")


def apply_thread_limit() -> int | None:
    """Export AEGAN_THREADS to the BLAS thread variables.

    Only effective before numpy loads its BLAS, so the package calls this on import.
    Explicit BLAS settings in the environment win.
    """
    limit = thread_limit()
    if limit is not None:
        if limit < 1:
            raise ValueError(f"AEGAN_THREADS must be positive, got {limit}")
        for var in _THREAD_VARS:
            os.environ.setdefault(var, str(limit))
    return limit
