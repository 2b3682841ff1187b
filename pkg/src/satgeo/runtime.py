"""Process-level knobs: allocator thresholds and BLAS thread caps."""

import ctypes
import logging
import os

log = logging.getLogger(__name__)

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def keep_heap(threshold=1 << 30):
    """Stop glibc from returning large array buffers to the OS after every free.

    Training allocates and frees the same multi-megabyte arrays each
    iteration; serving them from mmap costs a page fault per page.
    Returns False where glibc is unavailable.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    return bool(libc.mallopt(_M_MMAP_THRESHOLD, threshold)) and bool(
        libc.mallopt(_M_TRIM_THRESHOLD, threshold))


def cap_threads(env="SATGEO_THREADS"):
    """Limit BLAS/OpenMP pools to $SATGEO_THREADS workers when it is set."""
    value = os.environ.get(env)
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ValueError(f"{env} must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ValueError(f"{env} must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)
