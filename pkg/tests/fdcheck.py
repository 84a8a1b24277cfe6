"""Central finite-difference gradient oracle, independent of the tape."""

from __future__ import annotations

import numpy as np


def central_diff(loss_fn, arrays: dict[str, np.ndarray], h: float = 1e-5):
    """d loss / d arrays[name][i] by central differences, elementwise."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_fn()
            flat[i] = orig - h
            lo = loss_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]):
    """max over params of |analytic - numeric| / max(1, |analytic|)."""
    worst = 0.0
    worst_name = None
    for name, a in analytic.items():
        n = numeric[name]
        err = np.abs(a - n) / np.maximum(1.0, np.abs(a))
        m = float(err.max()) if err.size else 0.0
        if m > worst:
            worst, worst_name = m, name
    return worst, worst_name
