"""Hot per-parameter kernels, compiled when available.

The Cython build is used unless it failed to compile or ``SMLT_PURE_PYTHON=1``
is set. ``BACKEND`` names the active path.
"""

import os

import numpy as np

from . import _kernels_py

_compiled = None
if os.environ.get("SMLT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def hard_concrete_gate(log_alpha, u, beta, gamma, zeta):
    return _impl.hard_concrete_gate(_c(log_alpha), _c(u), float(beta), float(gamma), float(zeta))


def deterministic_gate(log_alpha, gamma, zeta):
    return _impl.deterministic_gate(_c(log_alpha), float(gamma), float(zeta))


def merge_forward(theta_pre, delta, alpha, gates):
    return _impl.merge_forward(_c(theta_pre), _c(delta), _c(alpha), _c(gates))


def merge_backward(g, delta, alpha, gates, w):
    return _impl.merge_backward(_c(g), _c(delta), _c(alpha), _c(gates), _c(w))


def pairwise_sqdist(a, b):
    return _impl.pairwise_sqdist(_c(a), _c(b))


def support_counts(a, b):
    return _impl.support_counts(_c(a), _c(b))
