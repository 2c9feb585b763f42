"""Finite-difference gradient oracle shared by the test modules.

The oracle only ever calls a scalar-valued forward function; it never looks
at tape internals, so it stays independent of the backward pass it checks.
"""

import numpy as np

FD_STEP = 1e-5


def finite_diff(f, arr, h=FD_STEP):
    """Central finite differences of scalar f() w.r.t. the entries of arr.

    f must re-read `arr` on every call; this mutates entries in place and
    restores them.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(a, b, floor=1e-2):
    """Max elementwise relative error with an absolute floor on the scale."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
