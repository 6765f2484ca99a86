"""Hot loops with a compiled core and a pure-Python fallback.

The Cython extension ``_core`` is used when it was built; otherwise, or when
the environment variable ``TASKALLOC_PURE_PYTHON`` is set to a non-empty
value other than ``0``, the NumPy implementation in ``_fallback`` is used.
Both expose the same two functions and consume identical random draws, so
results agree to rounding.
"""

import os

import numpy as np

from taskalloc.kernels import _fallback

try:
    from taskalloc.kernels import _core
except ImportError:  # extension not built
    _core = None

__all__ = ["BACKEND", "compiled_available", "get_backend", "pack"]

compiled_available = _core is not None


def _want_pure():
    return os.environ.get("TASKALLOC_PURE_PYTHON", "") not in ("", "0")


def get_backend(name=None):
    """Return the kernel module for ``name`` in {"compiled", "python", None}."""
    if name is None:
        name = "python" if (_want_pure() or not compiled_available) else "compiled"
    if name == "compiled":
        if not compiled_available:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _core
    if name == "python":
        return _fallback
    raise ValueError(f"unknown backend {name!r}")


BACKEND = "python" if (_want_pure() or not compiled_available) else "compiled"


def pack(family, w, G, theta, M):
    """Flatten model parameters into the contiguous layout the kernels expect."""
    f64 = np.float64
    theta = np.array(theta, dtype=f64, order="C")
    with np.errstate(divide="ignore"):
        logtheta = np.where(theta > 0, np.log(np.where(theta > 0, theta, 1.0)), -np.inf)
    lbar = family.max_levels if family.max_levels is not None else np.ones(family.m)
    return (
        int(family.saturating),
        float(M),
        np.array(family.incidence, dtype=f64, order="C"),
        np.array(family.R, dtype=f64, order="C"),
        np.array(family.alpha, dtype=f64, order="C"),
        np.array(family.beta, dtype=f64, order="C"),
        np.array(lbar, dtype=f64, order="C"),
        np.array(w, dtype=f64, order="C"),
        np.array(G, dtype=f64, order="C"),
        theta,
        np.array(logtheta, dtype=f64, order="C"),
    )
