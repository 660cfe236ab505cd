"""BLAS thread control for small-matrix workloads.

Multi-threaded BLAS is counterproductive at the matrix sizes this package
produces (synchronization dominates) and introduces machine-dependent
summation orders. Hot paths run under a single-threaded limit, which both
speeds up the small GEMMs and keeps results reproducible across thread
configurations.
"""

from __future__ import annotations

import contextlib

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


def single_threaded_blas():
    """Context manager limiting BLAS pools to one thread (no-op if unavailable)."""
    if threadpool_limits is None:
        return contextlib.nullcontext()
    return threadpool_limits(limits=1, user_api="blas")
