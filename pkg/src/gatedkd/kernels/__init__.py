"""Row-wise numeric kernels with a compiled core and a numpy fallback.

The non-BLAS hot path of a training step is the softmax family evaluated
over (rows x vocab) grids: log-softmax forward/backward, softmax
forward/backward, and row entropies. Those five kernels exist twice, with
identical signatures and semantics:

* ``_core`` - fused Cython loops (single pass per stage, no temporaries),
* ``pyref`` - vectorized numpy reference.

The compiled backend is selected at import when available; ``set_backend``
switches explicitly (tests, benchmarks). Dense contractions are not part of
the kernel surface: both backends delegate matrix products to numpy's BLAS,
which a hand-written loop cannot beat.

Backends agree to within a few ulps per row (reduction order differs), not
bitwise; determinism guarantees hold per backend.
"""

from gatedkd.kernels import pyref

try:
    from gatedkd.kernels import _core
except ImportError:  # pragma: no cover - depends on whether the ext was built
    _core = None

_BACKENDS = {"python": pyref}
if _core is not None:
    _BACKENDS["compiled"] = _core

_active_name = "compiled" if _core is not None else "python"


def active():
    """Module implementing the kernel surface for the current backend."""
    return _BACKENDS[_active_name]


def backend_name() -> str:
    return _active_name


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def set_backend(name: str) -> None:
    """Select a kernel backend by name ('compiled' or 'python')."""
    global _active_name
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _active_name = name
