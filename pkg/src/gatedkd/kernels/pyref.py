"""Numpy reference implementation of the row-wise kernel surface.

All kernels take C-contiguous float64 2-D arrays of shape (rows, classes)
and operate along the last axis. Stability follows the usual recipe:
row-max subtraction before exponentiation.
"""

import numpy as np


def log_softmax(z: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise log(softmax(z / tau))."""
    x = z / tau
    x = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=1, keepdims=True))
    return x - lse


def log_softmax_grad(logp: np.ndarray, gout: np.ndarray, tau: float) -> np.ndarray:
    """Adjoint of log_softmax: (gout - softmax * rowsum(gout)) / tau."""
    gsum = gout.sum(axis=1, keepdims=True)
    return (gout - np.exp(logp) * gsum) / tau


def softmax(z: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise softmax(z / tau)."""
    x = z / tau
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)


def softmax_grad(p: np.ndarray, gout: np.ndarray, tau: float) -> np.ndarray:
    """Adjoint of softmax: p * (gout - rowsum(gout * p)) / tau."""
    dot = (gout * p).sum(axis=1, keepdims=True)
    return p * (gout - dot) / tau


def row_entropy(p: np.ndarray) -> np.ndarray:
    """Per-row Shannon entropy -sum(p * ln p) in nats, with 0*ln(0) := 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)
