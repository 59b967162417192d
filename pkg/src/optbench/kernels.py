"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy fallback
takes over. ``use_backend`` switches explicitly (benchmarks, parity tests).
"""
from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

_active = _compiled if _compiled is not None else _kernels_py


def backend_name():
    return "compiled" if _active is _compiled and _compiled is not None else "python"


def use_backend(name):
    """Select ``"compiled"`` or ``"python"``; returns the previous name."""
    global _active
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable (have {sorted(BACKENDS)})")
    prev = backend_name()
    _active = BACKENDS[name]
    return prev


def fill_uint64(state, n):
    return _active.fill_uint64(state, n)


def jacobi_eigenvalues(a, tol, max_sweeps):
    return _active.jacobi_eigenvalues(a, tol, max_sweeps)


def ks_scan(lam, min_tail):
    return _active.ks_scan(lam, min_tail)
