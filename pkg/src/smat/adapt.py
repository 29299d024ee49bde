"""Meta-test adaptation: gradient-free expert selection and full fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .experts import MergeWeights, normalize
from .fewshot import Episode, ce_loss, protonet_logits, support_logits
from .metaopt import TrainState, direct_weights, fixed_gates, merged_model
from .optim import Adam
from .params import ParamSet


@dataclass
class SelectionSearchConfig:
    rounds: int = 3
    accept_prob: float = 0.9
    seed: int = 0
    leave_one_out: bool = False
    stochastic_gates: bool = False

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0.0 < self.accept_prob <= 1.0:
            raise ValueError("accept_prob must lie in (0, 1]")


@dataclass
class SelectionTrace:
    candidates: list[np.ndarray] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    accepted: list[bool] = field(default_factory=list)
    best: np.ndarray | None = None
    best_loss: float = np.inf

    def add(self, bits: np.ndarray, loss: float, accepted: bool) -> None:
        self.candidates.append(bits.copy())
        self.losses.append(loss)
        self.accepted.append(accepted)
        if loss < self.best_loss:
            self.best_loss, self.best = loss, bits.copy()


def binary_weights(bits: np.ndarray) -> MergeWeights:
    return normalize(Tensor(np.asarray(bits, dtype=np.float64)))


def support_loss(theta: ParamSet, episode: Episode, metric: str = "sqeuclid",
                 leave_one_out: bool = True) -> Tensor:
    return ce_loss(support_logits(theta, episode, metric, leave_one_out), episode.support_y)


def select_experts(state: TrainState, episode: Episode, cfg: SelectionSearchConfig,
                   metric: str = "sqeuclid", gates: Sequence[Tensor] | None = None,
                   init_bits: np.ndarray | None = None) -> tuple[MergeWeights, SelectionTrace]:
    """Bit-flip search over binary expert selections scored by support loss.

    Improving flips are accepted with probability ``accept_prob``, others
    with ``1 - accept_prob``. Only forward passes are run.
    """
    rng = np.random.default_rng([cfg.seed, int(episode.meta.get("index", 0)), 23])
    if gates is None:
        gates = fixed_gates(state, rng, cfg.stochastic_gates)
    gates = [g.detach() for g in gates]

    def evaluate(bits: np.ndarray) -> float:
        theta = merged_model(state, binary_weights(bits), gates)
        return support_loss(theta, episode, metric, cfg.leave_one_out).item()

    if init_bits is None:
        init_bits = (direct_weights(state, episode, "hard").raw.data > 0).astype(np.float64)
    cur = np.asarray(init_bits, dtype=np.float64).copy()
    trace = SelectionTrace()
    cur_loss = evaluate(cur)
    trace.add(cur, cur_loss, True)
    for _ in range(cfg.rounds):
        for m in range(len(cur)):
            cand = cur.copy()
            cand[m] = 1.0 - cand[m]
            loss = evaluate(cand)
            p = cfg.accept_prob if loss < cur_loss else 1.0 - cfg.accept_prob
            take = bool(rng.random() < p)
            trace.add(cand, loss, take)
            if take:
                cur, cur_loss = cand, loss
    return binary_weights(trace.best), trace


def exhaustive_selection(state: TrainState, episode: Episode, metric: str = "sqeuclid",
                         gates: Sequence[Tensor] | None = None,
                         leave_one_out: bool = False) -> tuple[np.ndarray, float]:
    """Brute-force minimum of the support loss over all 2**M selections."""
    gates = [g.detach() for g in (gates if gates is not None else fixed_gates(state))]
    m_count = state.pool.n_experts
    best, best_loss = None, np.inf
    for code in range(2 ** m_count):
        bits = np.array([(code >> i) & 1 for i in range(m_count)], dtype=np.float64)
        theta = merged_model(state, binary_weights(bits), gates)
        loss = support_loss(theta, episode, metric, leave_one_out).item()
        if loss < best_loss:
            best, best_loss = bits, loss
    return best, best_loss


@dataclass
class FinetuneResult:
    params: ParamSet
    query_logits: Tensor
    support_losses: list[float]


def finetune_full(state: TrainState, episode: Episode, steps: int, lr: float,
                  metric: str = "sqeuclid", leave_one_out: bool = True,
                  weights: MergeWeights | None = None,
                  gates: Sequence[Tensor] | None = None) -> FinetuneResult:
    """Adam on support loss over every parameter of the merged task model.

    The training state is never modified.
    """
    if weights is None:
        weights = direct_weights(state, episode)
    theta = merged_model(state, weights, gates if gates is not None else fixed_gates(state))
    specs = theta.specs
    arrays = [v.data.copy() for v in theta.values]
    opt = Adam(lr)
    losses = []
    for _ in range(steps if lr > 0 else 0):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        with dc.Tape() as tape:
            loss = support_loss(ParamSet(specs, leaves), episode, metric, leave_one_out)
        if not np.isfinite(loss.item()):
            raise dc.NonFiniteError("fine-tuning diverged")
        losses.append(loss.item())
        grads = tape.gradient(loss, leaves)
        arrays = opt.step(arrays, [g.data for g in grads])
    final = ParamSet(specs, [Tensor(a) for a in arrays])
    losses.append(support_loss(final, episode, metric, leave_one_out).item())
    return FinetuneResult(final, protonet_logits(final, episode, metric), losses)


def lr_search(state: TrainState, episodes: Sequence[Episode], grid: Sequence[float],
              steps: int, metric: str = "sqeuclid") -> dict[str, float]:
    """Per-domain learning rate minimising mean query loss after fine-tuning.

    Ties go to the smaller rate.
    """
    if not grid:
        raise ValueError("learning-rate grid is empty")
    grid = sorted(float(g) for g in grid)
    by_domain: dict[str, list[Episode]] = {}
    for ep in episodes:
        by_domain.setdefault(ep.domain, []).append(ep)
    out = {}
    for dom, eps in sorted(by_domain.items()):
        scores = []
        for lr in grid:
            vals = [ce_loss(finetune_full(state, e, steps, lr, metric).query_logits,
                            e.query_y).item() for e in eps]
            scores.append(float(np.mean(vals)))
        out[dom] = grid[int(np.argmin(scores))]
    return out
