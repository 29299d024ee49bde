"""Expert pool: frozen base, shared dense modulation, per-expert masks, merge."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import diffcore as dc
from . import kernels
from .diffcore import Tensor
from .l0mask import GateSample, HardConcreteMask, expected_density, init_log_alpha, sample_gate
from .optim import Adam, lagrange_update
from .params import ParamSet, SpecMismatch, zeros_like

log = logging.getLogger(__name__)


@dataclass
class ExpertPool:
    theta_pre: ParamSet
    theta_delta: ParamSet
    masks: list[HardConcreteMask]
    lambdas: np.ndarray
    tau: float

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        if not self.masks:
            raise ValueError("pool needs at least one expert")
        if self.theta_delta.specs != self.theta_pre.specs:
            raise SpecMismatch("theta_delta must share theta_pre's specs")
        d = self.theta_pre.total_dim
        for m in self.masks:
            if m.size != d:
                raise SpecMismatch(f"mask has {m.size} entries, expected {d}")
        if self.lambdas.shape != (len(self.masks),) or (self.lambdas < 0).any():
            raise ValueError("need one nonnegative multiplier per expert")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")

    @property
    def n_experts(self) -> int:
        return len(self.masks)

    @property
    def specs(self):
        return self.theta_pre.specs


def init_pool(theta_pre: ParamSet, n_experts: int, tau: float, rng: np.random.Generator,
              init_density: float = 0.5, init_std: float = 0.01, **mask_kw) -> ExpertPool:
    """Fresh pool: zero modulation, masks centred at ``init_density``."""
    d = theta_pre.total_dim
    masks = [HardConcreteMask(Tensor(init_log_alpha(d, rng, init_density, init_std, **mask_kw)),
                              **mask_kw)
             for _ in range(n_experts)]
    return ExpertPool(theta_pre.detach(), zeros_like(theta_pre), masks, np.zeros(n_experts), tau)


@dataclass
class MergeWeights:
    alpha: Tensor
    raw: Tensor = field(default=None)

    def __post_init__(self):
        if self.raw is None:
            self.raw = self.alpha
        a = self.alpha.data
        if (a < 0).any():
            raise ValueError("merge weights must be nonnegative")

    @property
    def is_zero(self) -> bool:
        return not np.any(self.alpha.data)


def normalize(raw: Tensor) -> MergeWeights:
    """``alpha = raw / sum(raw)``; an all-zero ``raw`` gives all-zero ``alpha``."""
    raw = dc.as_tensor(raw)
    if not np.any(raw.data > 0):
        return MergeWeights(Tensor(np.zeros(raw.shape)), raw)
    return MergeWeights(raw / dc.sum(raw), raw)


def _merge_op(theta_pre: np.ndarray, delta: Tensor, alpha: Tensor, gates: Tensor) -> Tensor:
    out, w = kernels.merge_forward(theta_pre, delta.data, alpha.data, gates.data)

    def vjp(g):
        return kernels.merge_backward(g, delta.data, alpha.data, gates.data, w)

    return dc.custom_op("merge", out, [delta, alpha, gates], vjp)


def merge_flat(theta_pre: np.ndarray, delta: Tensor, alpha: Tensor,
               gates: Sequence[Tensor]) -> Tensor:
    """Flat ``theta_pre + delta * sum_m alpha_m z_m``."""
    if len(gates) != alpha.shape[0]:
        raise ValueError(f"{alpha.shape[0]} weights for {len(gates)} gates")
    if not np.any(alpha.data):
        return Tensor(theta_pre)
    stacked = dc.concat([dc.reshape(g, (1, -1)) for g in gates], axis=0)
    return _merge_op(theta_pre, delta, alpha, stacked)


def merge(pool: ExpertPool, weights: MergeWeights, gates: Sequence[GateSample],
          delta_flat: Tensor | None = None) -> ParamSet:
    """Task model ``theta_pre + theta_delta * sum_m alpha_m z_m``.

    ``delta_flat`` lets a caller reuse one flattened (taped) modulation across
    several merges in the same step.
    """
    if len(gates) != pool.n_experts:
        raise ValueError(f"expected {pool.n_experts} gates, got {len(gates)}")
    if weights.alpha.shape != (pool.n_experts,):
        raise ValueError("merge weight count does not match the pool")
    if weights.is_zero:
        return pool.theta_pre
    if delta_flat is None:
        delta_flat = pool.theta_delta.flatten()
    flat = merge_flat(pool.theta_pre.flatten_view(), delta_flat, weights.alpha,
                      [g.z for g in gates])
    return ParamSet.unflatten(pool.specs, flat)


def merged_sparsity_bound(n_experts: int, tau: float) -> float:
    """Lower bound on merged-modulation sparsity when every mask meets ``tau``."""
    if n_experts < 1 or not 0.0 <= tau <= 1.0:
        raise ValueError("need n_experts >= 1 and tau in [0, 1]")
    return max(0.0, 1.0 - n_experts * (1.0 - tau))


# constrained single-mask fitting ---------------------------------------------

@dataclass
class MaskFitResult:
    mask: HardConcreteMask
    densities: list[float]
    lambdas: list[float]
    losses: list[float]


def fit_mask(theta_pre: np.ndarray, delta: np.ndarray,
             loss_fn: Callable[[Tensor, int], Tensor], tau: float, steps: int,
             rng: np.random.Generator, lr: float = 0.05, lr_lambda: float = 1.0,
             init_density: float = 0.5, mask: HardConcreteMask | None = None) -> MaskFitResult:
    """Train one mask on ``theta_pre + delta * z`` under ``1 - density >= tau``.

    ``loss_fn(theta_flat, step)`` returns the task loss for a merged flat
    parameter vector. Descent uses Adam on log-alphas; the multiplier follows
    projected ascent with reset.
    """
    d = theta_pre.size
    if mask is None:
        mask = HardConcreteMask(Tensor(init_log_alpha(d, rng, init_density)))
    la = mask.log_alpha.data.copy()
    opt = Adam(lr)
    lam = np.zeros(1)
    delta_t = Tensor(delta)
    one = Tensor(np.ones(1))
    dens, lams, losses = [], [], []
    for step in range(steps):
        leaf = Tensor(la, requires_grad=True)
        m = mask.with_log_alpha(leaf)
        with dc.Tape() as tape:
            gate = sample_gate(m, rng)
            theta = merge_flat(theta_pre, delta_t, one, [gate.z])
            task = loss_fn(theta, step)
            density = expected_density(m)
            violation = density - (1.0 - tau)
            total = task + float(lam[0]) * violation
        if not np.isfinite(total.item()):
            raise dc.NonFiniteError(f"mask fitting diverged at step {step}")
        (g,) = tape.gradient(total, [leaf])
        (la,) = opt.step([la], [g.data])
        lam = lagrange_update(lam, np.array([violation.item()]), lr_lambda)
        dens.append(density.item())
        lams.append(float(lam[0]))
        losses.append(task.item())
    return MaskFitResult(mask.with_log_alpha(Tensor(la)), dens, lams, losses)


def fit_domain_mask(theta_pre: ParamSet, theta_tuned: ParamSet, episodes: Iterable,
                    tau: float, steps: int, rng: np.random.Generator,
                    metric: str = "sqeuclid", **kw) -> MaskFitResult:
    """Sparse binary interpolation between a base and a tuned model on one domain."""
    from .fewshot import ce_loss, protonet_logits

    if theta_pre.specs != theta_tuned.specs:
        raise SpecMismatch("both parameter sets must share specs")
    specs = theta_pre.specs
    base = theta_pre.flatten_view()
    delta = theta_tuned.flatten_view() - base
    it = iter(episodes)

    def loss_fn(theta: Tensor, step: int) -> Tensor:
        ep = next(it)
        return ce_loss(protonet_logits(ParamSet.unflatten(specs, theta), ep, metric), ep.query_y)

    return fit_mask(base, delta, loss_fn, tau, steps, rng, **kw)
