"""Hot numeric kernels.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback
with the same signature. Setting ``HYPERTUNE_DISABLE_NUMBA=1`` (or running
without numba installed) selects the fallback.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("HYPERTUNE_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        if args and callable(args[0]):
            return args[0]
        return decorator


USE_NUMBA = HAVE_NUMBA and not _DISABLED


def burn_numpy(buf: np.ndarray, n_samples: int, iters: int) -> float:
    """Per-sample arithmetic: a dot product over ``iters`` buffer entries."""
    n = buf.shape[0]
    acc = 0.0
    for s in range(n_samples):
        start = (s * 31) % n
        idx = (start + np.arange(iters)) % n
        v = buf[idx]
        acc = acc * 0.5 + float(np.dot(v, v))
    return acc


@njit(nogil=True, cache=True)
def burn_numba(buf, n_samples, iters):
    n = buf.shape[0]
    acc = 0.0
    for s in range(n_samples):
        start = (s * 31) % n
        part = 0.0
        for k in range(iters):
            x = buf[(start + k) % n]
            part += x * x
        acc = acc * 0.5 + part
    return acc


def accumulate_numpy(counts: np.ndarray, ids: np.ndarray) -> None:
    # ids may repeat across calls but never within one call
    np.add.at(counts, ids, 1)


@njit(nogil=True, cache=True)
def accumulate_numba(counts, ids):
    for i in range(ids.shape[0]):
        counts[ids[i]] += 1


if USE_NUMBA:
    burn = burn_numba
    accumulate = accumulate_numba
else:
    burn = burn_numpy
    accumulate = accumulate_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
