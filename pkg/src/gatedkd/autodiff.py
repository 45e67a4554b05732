"""Dense float64 tensors with hand-written gradients on a linear tape.

Tensors are C-contiguous float64 numpy arrays (row-major). ``DualTensor``
pairs a value with a lazily allocated, additively accumulated gradient of
the same shape. Every differentiable operation takes an optional ``Tape``;
with a tape it records one adjoint step, without one it is a plain forward
evaluation. ``Tape.backward`` replays the steps in reverse recorded order,
which makes gradient accumulation deterministic for a fixed program.

Scope is deliberately narrow: first-order reverse mode over a fixed op set,
no dynamic graph beyond the linear tape.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from gatedkd import kernels
from gatedkd.errors import ValidationError

MIN_PROB = 1e-12  # floor applied before taking log of a probability


def as_f64(x) -> np.ndarray:
    """Coerce to a C-ordered float64 array (0-d inputs stay 0-d)."""
    return np.asarray(x, dtype=np.float64, order="C")


def safe_log(p: np.ndarray) -> np.ndarray:
    """log with probabilities floored at MIN_PROB."""
    return np.log(np.maximum(p, MIN_PROB))


class DualTensor:
    """A value tensor plus an accumulated gradient of identical shape."""

    __slots__ = ("value", "_grad")

    def __init__(self, value):
        self.value = as_f64(value)
        self._grad = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    def add_grad(self, g: np.ndarray) -> None:
        self.grad.__iadd__(g)

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad.fill(0.0)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"DualTensor(shape={self.value.shape})"


def dual(x) -> DualTensor:
    return x if isinstance(x, DualTensor) else DualTensor(x)


class Tape:
    """Linear record of adjoint steps, replayed in reverse by backward()."""

    def __init__(self):
        self._steps: list[Callable[[], None]] = []

    def record(self, step: Callable[[], None]) -> None:
        self._steps.append(step)

    def __len__(self) -> int:
        return len(self._steps)

    def backward(self, root: DualTensor) -> None:
        """Seed d(root)/d(root) = 1 and accumulate into every input's grad."""
        if root.value.shape != ():
            raise ValidationError(f"backward needs a scalar root, got shape {root.value.shape}")
        root.grad[...] = 1.0
        for step in reversed(self._steps):
            step()


def _rows2d(x: np.ndarray) -> np.ndarray:
    """View (..., V) as (rows, V) for the row-wise kernels."""
    return np.ascontiguousarray(x).reshape(-1, x.shape[-1])


# ---------------------------------------------------------------------------
# Differentiable operations
# ---------------------------------------------------------------------------


def matmul(a: DualTensor, b: DualTensor, tape: Tape | None = None) -> DualTensor:
    """(..., k) @ (k, n). Leading axes of ``a`` are flattened for the product."""
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.ndim < 2 or av.shape[-1] != bv.shape[0]:
        raise ValidationError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    a2 = av.reshape(-1, av.shape[-1])
    out = DualTensor((a2 @ bv).reshape(*av.shape[:-1], bv.shape[1]))
    if tape is not None:
        def step():
            g2 = out.grad.reshape(-1, bv.shape[1])
            a.add_grad((g2 @ bv.T).reshape(av.shape))
            b.add_grad(a2.T @ g2)
        tape.record(step)
    return out


def bmm(a: DualTensor, b: DualTensor, tape: Tape | None = None) -> DualTensor:
    """Batched (B, m, k) @ (B, k, n)."""
    av, bv = a.value, b.value
    if av.ndim != 3 or bv.ndim != 3 or av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[1]:
        raise ValidationError(f"bmm shape mismatch: {av.shape} @ {bv.shape}")
    out = DualTensor(np.matmul(av, bv))
    if tape is not None:
        def step():
            g = out.grad
            a.add_grad(np.matmul(g, bv.swapaxes(1, 2)))
            b.add_grad(np.matmul(av.swapaxes(1, 2), g))
        tape.record(step)
    return out


def bmm_nt(a: DualTensor, b: DualTensor, tape: Tape | None = None) -> DualTensor:
    """Batched (B, m, k) @ (B, n, k)^T -> (B, m, n); the attention-score product."""
    av, bv = a.value, b.value
    if av.ndim != 3 or bv.ndim != 3 or av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[2]:
        raise ValidationError(f"bmm_nt shape mismatch: {av.shape} @ {bv.shape}^T")
    out = DualTensor(np.matmul(av, bv.swapaxes(1, 2)))
    if tape is not None:
        def step():
            g = out.grad
            a.add_grad(np.matmul(g, bv))
            b.add_grad(np.matmul(g.swapaxes(1, 2), av))
        tape.record(step)
    return out


def add(a: DualTensor, b: DualTensor, tape: Tape | None = None) -> DualTensor:
    if a.value.shape != b.value.shape:
        raise ValidationError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    out = DualTensor(a.value + b.value)
    if tape is not None:
        def step():
            a.add_grad(out.grad)
            b.add_grad(out.grad)
        tape.record(step)
    return out


def add_bias(a: DualTensor, bias: DualTensor, tape: Tape | None = None) -> DualTensor:
    """Add a (n,) bias along the last axis of (..., n)."""
    if bias.value.ndim != 1 or a.value.shape[-1] != bias.value.shape[0]:
        raise ValidationError(f"add_bias shape mismatch: {a.value.shape} + {bias.value.shape}")
    out = DualTensor(a.value + bias.value)
    if tape is not None:
        def step():
            a.add_grad(out.grad)
            bias.add_grad(out.grad.reshape(-1, bias.value.shape[0]).sum(axis=0))
        tape.record(step)
    return out


def add_const(a: DualTensor, c, tape: Tape | None = None) -> DualTensor:
    """Add a constant (no gradient) array or scalar, broadcast to a's shape."""
    value = a.value + c
    if value.shape != a.value.shape:
        raise ValidationError(f"add_const changed shape: {a.value.shape} -> {value.shape}")
    out = DualTensor(value)
    if tape is not None:
        tape.record(lambda: a.add_grad(out.grad))
    return out


def mul_const(a: DualTensor, m, tape: Tape | None = None) -> DualTensor:
    """Multiply by a constant (no gradient) array or scalar, same shape out."""
    m = np.asarray(m, dtype=np.float64)
    value = a.value * m
    if value.shape != a.value.shape:
        raise ValidationError(f"mul_const changed shape: {a.value.shape} -> {value.shape}")
    out = DualTensor(value)
    if tape is not None:
        tape.record(lambda: a.add_grad(out.grad * m))
    return out


def scale(a: DualTensor, s: float, tape: Tape | None = None) -> DualTensor:
    out = DualTensor(a.value * s)
    if tape is not None:
        tape.record(lambda: a.add_grad(out.grad * s))
    return out


def relu(a: DualTensor, tape: Tape | None = None) -> DualTensor:
    out = DualTensor(np.maximum(a.value, 0.0))
    if tape is not None:
        mask = a.value > 0.0
        tape.record(lambda: a.add_grad(out.grad * mask))
    return out


def log_softmax(a: DualTensor, temperature: float = 1.0, tape: Tape | None = None) -> DualTensor:
    """Last-axis log-probabilities of softmax(value / temperature)."""
    if temperature <= 0.0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    shape = a.value.shape
    logp = kernels.active().log_softmax(_rows2d(a.value), temperature)
    out = DualTensor(logp.reshape(shape))
    if tape is not None:
        def step():
            g = kernels.active().log_softmax_grad(logp, _rows2d(out.grad), temperature)
            a.add_grad(g.reshape(shape))
        tape.record(step)
    return out


def softmax(a: DualTensor, temperature: float = 1.0, tape: Tape | None = None) -> DualTensor:
    if temperature <= 0.0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    shape = a.value.shape
    p = kernels.active().softmax(_rows2d(a.value), temperature)
    out = DualTensor(p.reshape(shape))
    if tape is not None:
        def step():
            g = kernels.active().softmax_grad(p, _rows2d(out.grad), temperature)
            a.add_grad(g.reshape(shape))
        tape.record(step)
    return out


def embed(table: DualTensor, ids: np.ndarray, tape: Tape | None = None) -> DualTensor:
    """Gather rows of a (V, d) table by an integer id grid; scatter-add adjoint."""
    if table.value.ndim != 2:
        raise ValidationError(f"embedding table must be 2-D, got {table.value.shape}")
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.value.shape[0]:
        raise ValidationError("embedding ids out of range")
    out = DualTensor(table.value[ids])
    if tape is not None:
        def step():
            g = out.grad.reshape(-1, table.value.shape[1])
            np.add.at(table.grad, ids.ravel(), g)
        tape.record(step)
    return out


def gather_last(a: DualTensor, ids: np.ndarray, tape: Tape | None = None) -> DualTensor:
    """Pick one entry along the last axis per leading position: out[..] = a[.., ids[..]]."""
    ids = np.asarray(ids)
    if ids.shape != a.value.shape[:-1]:
        raise ValidationError(f"gather ids shape {ids.shape} != leading dims of {a.value.shape}")
    idx = np.expand_dims(ids, -1)
    out = DualTensor(np.take_along_axis(a.value, idx, axis=-1).squeeze(-1))
    if tape is not None:
        def step():
            g = np.zeros_like(a.value)
            np.put_along_axis(g, idx, np.expand_dims(out.grad, -1), axis=-1)
            a.add_grad(g)
        tape.record(step)
    return out


def rowdot(a: DualTensor, w: np.ndarray, tape: Tape | None = None) -> DualTensor:
    """Per-row dot product with a constant weight grid of identical shape."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != a.value.shape:
        raise ValidationError(f"rowdot shape mismatch: {a.value.shape} vs {w.shape}")
    out = DualTensor((a.value * w).sum(axis=-1))
    if tape is not None:
        tape.record(lambda: a.add_grad(np.expand_dims(out.grad, -1) * w))
    return out


def masked_mean(a: DualTensor, mask: np.ndarray, tape: Tape | None = None) -> DualTensor:
    """Mean over the True positions of a boolean mask; scalar output."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.value.shape:
        raise ValidationError(f"mask shape {mask.shape} != value shape {a.value.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValidationError("masked_mean over an empty mask")
    out = DualTensor(np.asarray(a.value[mask].mean()))
    if tape is not None:
        def step():
            g = np.zeros_like(a.value)
            g[mask] = float(out.grad) / count
            a.add_grad(g)
        tape.record(step)
    return out


def masked_rowsum(a: DualTensor, mask: np.ndarray, tape: Tape | None = None) -> DualTensor:
    """Per-row sum over True positions of a (B, T) grid -> (B,)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.value.shape or a.value.ndim != 2:
        raise ValidationError(f"masked_rowsum needs matching 2-D shapes, got {a.value.shape} and {mask.shape}")
    out = DualTensor((a.value * mask).sum(axis=1))
    if tape is not None:
        tape.record(lambda: a.add_grad(out.grad[:, None] * mask))
    return out


# ---------------------------------------------------------------------------
# Non-tape numerics
# ---------------------------------------------------------------------------


def entropy(p) -> float:
    """Shannon entropy -sum(p ln p) in nats of one distribution, 0*ln(0) := 0.

    The input must be a normalized probability vector (sum within 1e-9 of 1,
    entries nonnegative).
    """
    p = as_f64(p)
    if p.ndim != 1:
        raise ValidationError(f"entropy expects a vector, got shape {p.shape}")
    if np.any(p < 0.0):
        raise ValidationError("entropy input has negative entries")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValidationError(f"entropy input sums to {p.sum()!r}, not 1")
    return float(kernels.active().row_entropy(p.reshape(1, -1))[0])


def row_entropies(p: np.ndarray) -> np.ndarray:
    """Entropy of each row of a (..., V) grid of distributions (unvalidated)."""
    p = as_f64(p)
    return kernels.active().row_entropy(_rows2d(p)).reshape(p.shape[:-1])
