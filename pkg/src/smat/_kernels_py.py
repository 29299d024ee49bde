"""Pure numpy kernels. Reference path and fallback when the extension is absent."""

import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def hard_concrete_gate(log_alpha, u, beta, gamma, zeta):
    """Stretched, rectified concrete sample and its derivative wrt log_alpha."""
    s = _sigmoid((np.log(u) - np.log1p(-u) + log_alpha) / beta)
    sbar = s * (zeta - gamma) + gamma
    z = np.clip(sbar, 0.0, 1.0)
    inside = (sbar > 0.0) & (sbar < 1.0)
    dz = np.where(inside, (zeta - gamma) * s * (1.0 - s) / beta, 0.0)
    return z, dz


def deterministic_gate(log_alpha, gamma, zeta):
    return np.clip(_sigmoid(log_alpha) * (zeta - gamma) + gamma, 0.0, 1.0)


def merge_forward(theta_pre, delta, alpha, gates):
    w = alpha @ gates
    return theta_pre + delta * w, w


def merge_backward(g, delta, alpha, gates, w):
    gd = g * delta
    return g * w, gates @ gd, np.outer(alpha, gd)


def pairwise_sqdist(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def support_counts(a, b):
    """(|a != 0 and b != 0|, |a != 0 or b != 0|)."""
    na, nb = a != 0, b != 0
    return int(np.count_nonzero(na & nb)), int(np.count_nonzero(na | nb))
