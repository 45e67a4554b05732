"""Central-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from gatedkd.errors import NumericError

GradFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def finite_diff_check(f: GradFn, x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between f's analytic gradient and central differences.

    ``f`` maps a float64 array to ``(scalar value, gradient array)``. Each
    coordinate i is perturbed by +/- h and the two-sided slope is compared
    against the analytic gradient entry, with the relative error measured
    against ``max(|g_i|, 1e-8)`` so that exact zeros compare exactly.
    """
    x = np.array(x, dtype=np.float64)
    value, grad = f(x)
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericError("non-finite value or gradient at the base point")
    if grad.shape != x.shape:
        raise NumericError(f"gradient shape {grad.shape} does not match input {x.shape}")

    worst = 0.0
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up, _ = f(x)
        flat[i] = orig - h
        down, _ = f(x)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite evaluation while perturbing coordinate {i}")
        fd = (up - down) / (2.0 * h)
        rel = abs(fd - gflat[i]) / max(abs(gflat[i]), 1e-8)
        worst = max(worst, rel)
    return worst
