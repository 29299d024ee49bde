"""Stretched hard-concrete masks with an analytic expected-L0 measure."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import kernels
from .diffcore import Tensor

BETA = 2.0 / 3.0
GAMMA = -0.1
ZETA_S = 1.1
EPS_U = 1e-6


@dataclass(frozen=True)
class HardConcreteMask:
    log_alpha: Tensor
    beta: float = BETA
    gamma: float = GAMMA
    zeta_s: float = ZETA_S

    def __post_init__(self):
        if not (self.gamma < 0.0 < 1.0 < self.zeta_s):
            raise ValueError("need gamma < 0 < 1 < zeta_s")
        if not (0.0 < self.beta <= 1.0):
            raise ValueError("beta must lie in (0, 1]")
        if not np.isfinite(self.log_alpha.data).all():
            raise ValueError("log_alpha must be finite")

    @property
    def size(self) -> int:
        return self.log_alpha.size

    def with_log_alpha(self, log_alpha) -> "HardConcreteMask":
        return HardConcreteMask(dc.as_tensor(log_alpha), self.beta, self.gamma, self.zeta_s)


@dataclass(frozen=True)
class GateSample:
    z: Tensor
    u: np.ndarray | None = None


def init_log_alpha(size: int, rng: np.random.Generator, density: float = 0.5,
                   std: float = 0.01, beta: float = BETA, gamma: float = GAMMA,
                   zeta_s: float = ZETA_S) -> np.ndarray:
    """Normal draws centred where ``prob_nonzero`` equals ``density``."""
    centre = math.log(density / (1.0 - density)) + beta * math.log(-gamma / zeta_s)
    return rng.normal(centre, std, size)


def uniform_noise(size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(EPS_U, 1.0 - EPS_U, size)


def sample_gate(mask: HardConcreteMask, rng: np.random.Generator | None = None,
                u: np.ndarray | None = None) -> GateSample:
    """Reparameterized gate ``z = clamp(stretch(sigmoid((logit u + log_alpha)/beta)), 0, 1)``."""
    if u is None:
        u = uniform_noise(mask.size, rng)
    la = mask.log_alpha
    flat = la.data.reshape(-1)
    z, dz = kernels.hard_concrete_gate(flat, np.asarray(u).reshape(-1), mask.beta,
                                       mask.gamma, mask.zeta_s)
    out = dc.custom_op("hard_concrete_gate", z.reshape(la.shape), [la],
                       lambda g: (g * dz.reshape(la.shape),))
    return GateSample(out, np.asarray(u))


def sample_gate_composed(mask: HardConcreteMask, u: np.ndarray) -> Tensor:
    """Same gate built from primitive ops; used to cross-check the fused kernel."""
    noise = np.log(u) - np.log1p(-u)
    s = dc.sigmoid((mask.log_alpha + noise) / mask.beta)
    return dc.clamp(s * (mask.zeta_s - mask.gamma) + mask.gamma, 0.0, 1.0)


def prob_nonzero(mask: HardConcreteMask) -> Tensor:
    """P(z > 0) per entry, i.e. one minus the stretched CDF at zero."""
    shift = mask.beta * math.log(-mask.gamma / mask.zeta_s)
    return dc.sigmoid(mask.log_alpha - shift)


def expected_density(mask: HardConcreteMask) -> Tensor:
    return dc.mean(prob_nonzero(mask))


def sparsity(mask: HardConcreteMask) -> Tensor:
    return 1.0 - expected_density(mask)


def deterministic_gate(mask: HardConcreteMask) -> GateSample:
    z = kernels.deterministic_gate(mask.log_alpha.data.reshape(-1), mask.gamma, mask.zeta_s)
    return GateSample(Tensor(z.reshape(mask.log_alpha.shape)))


def binarize(gate, threshold: float = 0.5) -> np.ndarray:
    z = gate.z.data if isinstance(gate, GateSample) else np.asarray(getattr(gate, "data", gate))
    return (z > threshold).astype(np.float64)


def union(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("masks must share a shape")
    return np.maximum(a, b)


def overlap_ratio(a, b) -> float:
    """|joint nonzero| / |either nonzero|; 0 when both are empty."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("masks must share a shape")
    joint, either = kernels.support_counts(a.reshape(-1), b.reshape(-1))
    return joint / either if either else 0.0
