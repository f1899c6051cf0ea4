"""Backend dispatch for the hot numeric kernels.

MIMO_ADAPT_BACKEND selects the implementation: "numpy" forces the batched
numpy path, "numba" forces the compiled per-sample path, "auto" (default)
uses numba when importable and falls back to numpy.  The variable is read
on every call so tests can flip it at runtime.
"""

import os

from . import _numpy

_BACKENDS = {"auto", "numba", "numpy"}
_numba_mod = None
_numba_error = None


def _load_numba():
    global _numba_mod, _numba_error
    if _numba_mod is None and _numba_error is None:
        try:
            from . import _numba as mod
            _numba_mod = mod
        except ImportError as exc:
            _numba_error = exc
    return _numba_mod


def active_backend():
    """Resolve the backend name currently in effect."""
    choice = os.environ.get("MIMO_ADAPT_BACKEND", "auto").lower()
    if choice not in _BACKENDS:
        raise ValueError(f"MIMO_ADAPT_BACKEND must be one of {sorted(_BACKENDS)}, got {choice!r}")
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        if _load_numba() is None:
            raise ImportError(f"numba backend requested but unavailable: {_numba_error}")
        return "numba"
    return "numba" if _load_numba() is not None else "numpy"


def _mod():
    return _numba_mod if active_backend() == "numba" else _numpy


def sum_rate(h, v, noise):
    return _mod().sum_rate(h, v, noise)


def wmmse_solve(h, v0, noise, p_max, tol, max_iter):
    return _mod().wmmse_solve(h, v0, noise, p_max, tol, max_iter)


def mrt_init(h, p_max):
    # init is cheap; the batched numpy version serves both backends
    return _numpy.mrt_init(h, p_max)
