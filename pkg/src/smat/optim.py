"""Optimizers: adaptive-moment descent and projected multiplier ascent."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray],
             lrs: list[float] | None = None) -> list[np.ndarray]:
        """One update; ``lrs`` overrides the step size per parameter array."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            lr = self.lr if lrs is None else lrs[i]
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            out.append(p - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        d = {"t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            d[f"m{i}"] = m
            d[f"v{i}"] = v
        return d

    def load_arrays(self, d: dict[str, np.ndarray]) -> None:
        self.t = int(d["t"][0])
        n = sum(1 for k in d if k.startswith("m"))
        self.m = [np.array(d[f"m{i}"]) for i in range(n)]
        self.v = [np.array(d[f"v{i}"]) for i in range(n)]


def lagrange_update(lambdas: np.ndarray, violations: np.ndarray, lr: float,
                    weights: np.ndarray | None = None) -> np.ndarray:
    """Projected ascent with reset: grow on violation, zero once satisfied.

    ``weights`` optionally scales each multiplier's ascent step.
    """
    lambdas = np.asarray(lambdas, dtype=np.float64)
    v = np.asarray(violations, dtype=np.float64)
    step = lr * v if weights is None else lr * v * np.asarray(weights)
    return np.where(v > 0.0, np.maximum(0.0, lambdas + step), 0.0)
