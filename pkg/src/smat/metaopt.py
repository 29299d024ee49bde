"""Constrained meta-training of the expert pool and router."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .experts import ExpertPool, MergeWeights, init_pool, merge_flat
from .fewshot import Episode, ce_loss, kd_loss, protonet_logits
from .l0mask import deterministic_gate, expected_density, sample_gate
from .optim import Adam, lagrange_update
from .params import ParamSet
from .router import RouterParams, encode_prototypes, init_router, route

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n_experts: int = 4
    tau: float = 0.9
    beta_w: float = 0.5
    kd_temp: float = 2.0
    k_teacher: int = 1
    lr_main: float = 1e-3
    lr_mask: float = 2e-2
    lr_lambda: float = 1.0
    lr_teacher: float = 0.1
    batch_tasks: int = 2
    max_steps: int = 1000
    seed: int = 0
    metric: str = "sqeuclid"
    init_density: float = 0.5
    gumbel_temp: float = 1.0
    gumbel_temp_final: float | None = None
    router_heads: int = 2
    alpha_weighted_lambda: bool = False
    eval_every: int = 0
    val_episodes: int = 40

    def __post_init__(self):
        for name in ("lr_main", "lr_mask", "lr_lambda", "lr_teacher", "kd_temp", "gumbel_temp"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if not 0.0 <= self.beta_w <= 1.0:
            raise ValueError("beta_w must lie in [0, 1]")
        if self.k_teacher < 1 or self.n_experts < 1 or self.batch_tasks < 1:
            raise ValueError("k_teacher, n_experts and batch_tasks must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    pool: ExpertPool
    router: RouterParams
    step: int = 0
    opt: Adam = field(default_factory=lambda: Adam(1e-3))

    def clone(self) -> "TrainState":
        return copy.deepcopy(self)


def init_state(theta_pre: ParamSet, cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng([cfg.seed, 101])
    pool = init_pool(theta_pre, cfg.n_experts, cfg.tau, rng, cfg.init_density)
    width = theta_pre.specs[-1].shape[0]
    router = init_router(width, cfg.n_experts, rng, cfg.router_heads, gumbel_temp=cfg.gumbel_temp)
    return TrainState(pool, router, 0, Adam(cfg.lr_main))


def make_teacher(theta_i: ParamSet, episode: Episode, k: int, lr: float,
                 metric: str = "sqeuclid") -> ParamSet:
    """``k`` plain gradient steps on query cross-entropy from a detached copy."""
    if episode.query_y is None:
        raise ValueError("teacher needs a labeled query set")
    arrays = [v.data for v in theta_i.values]
    for _ in range(k):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        with dc.Tape() as tape:
            loss = ce_loss(protonet_logits(ParamSet(theta_i.specs, leaves), episode, metric),
                           episode.query_y)
        if not np.isfinite(loss.item()):
            raise dc.NonFiniteError("teacher loss is not finite")
        grads = tape.gradient(loss, leaves)
        arrays = [a - lr * g.data for a, g in zip(arrays, grads)]
    return ParamSet(theta_i.specs, [Tensor(a) for a in arrays])


def sparsity_violation(pool: ExpertPool) -> np.ndarray:
    """Per expert ``expected_density - (1 - tau)``; positive means violated."""
    return np.array([expected_density(m).item() - (1.0 - pool.tau) for m in pool.masks])


def episode_rng(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, index, 17])


def current_gumbel_temp(cfg: TrainConfig, step: int) -> float:
    if cfg.gumbel_temp_final is None or cfg.max_steps <= 1:
        return cfg.gumbel_temp
    frac = min(step / (cfg.max_steps - 1), 1.0)
    return cfg.gumbel_temp + frac * (cfg.gumbel_temp_final - cfg.gumbel_temp)


@dataclass
class StepResult:
    state: TrainState
    metrics: dict
    objective: float


def meta_objective(state: TrainState, episodes: Sequence[Episode], cfg: TrainConfig,
                   delta: Tensor, router_w: dict[str, Tensor], log_alphas: Sequence[Tensor],
                   gate_override: Sequence[np.ndarray] | None = None,
                   alpha_override: np.ndarray | None = None,
                   teacher_logits: Sequence[np.ndarray] | None = None) -> tuple[Tensor, dict]:
    """Batch objective: mean task loss plus ``sum_m lambda_m * v_m``.

    Differentiable in ``delta``, ``router_w`` and ``log_alphas``. Noise comes
    from ``episode_rng(cfg.seed, state.step, i)``. Passing ``teacher_logits``
    pins the distillation targets instead of recomputing them.
    """
    if not episodes:
        raise ValueError("batch must be nonempty")
    pool = state.pool
    theta_pre_flat = pool.theta_pre.flatten_view()
    masks = [m.with_log_alpha(t) for m, t in zip(pool.masks, log_alphas)]
    temp = current_gumbel_temp(cfg, state.step)
    ces, kds, alphas, teachers, losses, noise = [], [], [], [], [], []
    for idx, ep in enumerate(episodes):
        rng = episode_rng(cfg.seed, state.step, idx)
        if alpha_override is not None:
            alpha = Tensor(np.asarray(alpha_override, dtype=np.float64))
        else:
            protos = encode_prototypes(pool.theta_pre, ep.support_x, ep.support_y, ep.n_way)
            alpha = route(state.router, protos, rng, "train", weights=router_w, temp=temp).alpha
        if gate_override is not None:
            gates = [Tensor(np.asarray(g, dtype=np.float64)) for g in gate_override]
            noise.append(None)
        else:
            samples = [sample_gate(m, rng) for m in masks]
            gates = [g.z for g in samples]
            noise.append([g.u for g in samples])
        theta_i = ParamSet.unflatten(pool.specs, merge_flat(theta_pre_flat, delta, alpha, gates))
        student = protonet_logits(theta_i, ep, cfg.metric)
        ce = ce_loss(student, ep.query_y)
        if cfg.beta_w < 1.0:
            if teacher_logits is not None:
                t_logits = np.asarray(teacher_logits[idx])
            else:
                teacher = make_teacher(theta_i.detach(), ep, cfg.k_teacher, cfg.lr_teacher,
                                       cfg.metric)
                t_logits = protonet_logits(teacher, ep, cfg.metric).data
            kd = kd_loss(student, t_logits, cfg.kd_temp)
            loss = cfg.beta_w * ce + (1.0 - cfg.beta_w) * kd if cfg.beta_w > 0 else kd
            kds.append(kd.item())
            teachers.append(t_logits)
        else:
            loss = ce
            kds.append(0.0)
            teachers.append(None)
        ces.append(ce.item())
        alphas.append(alpha.data.copy())
        losses.append(loss)
    task_obj = dc.sum(dc.concat([dc.reshape(l, (1,)) for l in losses])) / len(losses)
    densities = [expected_density(m) for m in masks]
    violations = np.array([d.item() - (1.0 - pool.tau) for d in densities])
    objective = task_obj
    for lam, d in zip(pool.lambdas, densities):
        if lam != 0.0:
            # lambda enters as a constant: no gradient flows into it
            objective = objective + float(lam) * (d - (1.0 - pool.tau))
    aux = {"ces": ces, "kds": kds, "alphas": alphas, "teacher_logits": teachers,
           "densities": [d.item() for d in densities], "violations": violations,
           "gate_noise": noise}
    return objective, aux


def meta_step(state: TrainState, episodes: Sequence[Episode], cfg: TrainConfig,
              gate_override: Sequence[np.ndarray] | None = None,
              alpha_override: np.ndarray | None = None) -> StepResult:
    """One simultaneous descent/ascent update on a batch of episodes.

    ``gate_override`` and ``alpha_override`` pin the gates or merge weights,
    bypassing sampling (used for equivalence checks).
    """
    pool, router = state.pool, state.router
    m_count = pool.n_experts
    delta = Tensor(pool.theta_delta.flatten_view(), requires_grad=True)
    r_names = router.names()
    r_leaves = router.tensors(requires_grad=True)
    la_leaves = [Tensor(m.log_alpha.data, requires_grad=True) for m in pool.masks]
    with dc.Tape() as tape:
        objective, aux = meta_objective(state, episodes, cfg, delta, r_leaves, la_leaves,
                                        gate_override, alpha_override)
    if not np.isfinite(objective.item()):
        raise dc.NonFiniteError(
            f"meta objective non-finite at step {state.step}: ce={aux['ces']} kd={aux['kds']}")

    wrt = [delta, *(r_leaves[n] for n in r_names), *la_leaves]
    grads = [g.data for g in tape.gradient(objective, wrt)]
    params = [delta.data, *(router.arrays[n] for n in r_names), *(t.data for t in la_leaves)]
    lrs = [cfg.lr_main] * (1 + len(r_names)) + [cfg.lr_mask] * m_count
    new = state.opt.step(params, grads, lrs)
    mean_alpha = np.mean(aux["alphas"], axis=0)
    weights = mean_alpha if cfg.alpha_weighted_lambda else None
    lambdas = lagrange_update(pool.lambdas, aux["violations"], cfg.lr_lambda, weights)

    new_delta = ParamSet.unflatten(pool.specs, Tensor(new[0]))
    new_router = router.replace(dict(zip(r_names, new[1:1 + len(r_names)])))
    new_masks = [m.with_log_alpha(Tensor(a)) for m, a in zip(pool.masks, new[1 + len(r_names):])]
    new_pool = ExpertPool(pool.theta_pre, new_delta, new_masks, lambdas, pool.tau)
    metrics = {
        "step": state.step,
        "mean_ce": float(np.mean(aux["ces"])),
        "mean_kd": float(np.mean(aux["kds"])),
        "densities": aux["densities"],
        "violations": aux["violations"].tolist(),
        "lambdas": lambdas.tolist(),
        "lambdas_used": pool.lambdas.tolist(),
        "mean_alpha": mean_alpha.tolist(),
    }
    new_state = TrainState(new_pool, new_router, state.step + 1, state.opt)
    return StepResult(new_state, metrics, objective.item())


# evaluation helpers used during training ------------------------------------

def direct_weights(state: TrainState, episode: Episode, mode: str = "soft") -> MergeWeights:
    protos = encode_prototypes(state.pool.theta_pre, episode.support_x, episode.support_y,
                               episode.n_way)
    return route(state.router, protos, None, mode)


def fixed_gates(state: TrainState, rng: np.random.Generator | None = None,
                stochastic: bool = False) -> list[Tensor]:
    if stochastic:
        return [sample_gate(m.with_log_alpha(m.log_alpha.detach()), rng).z
                for m in state.pool.masks]
    return [deterministic_gate(m).z for m in state.pool.masks]


def merged_model(state: TrainState, weights: MergeWeights, gates: Sequence[Tensor]) -> ParamSet:
    pool = state.pool
    if weights.is_zero:
        return pool.theta_pre
    flat = merge_flat(pool.theta_pre.flatten_view(), Tensor(pool.theta_delta.flatten_view()),
                      weights.alpha.detach(), [g.detach() for g in gates])
    return ParamSet.unflatten(pool.specs, flat)


def direct_accuracy(state: TrainState, episode: Episode, metric: str = "sqeuclid",
                    gates: Sequence[Tensor] | None = None) -> float:
    from .fewshot import accuracy

    gates = gates if gates is not None else fixed_gates(state)
    theta = merged_model(state, direct_weights(state, episode), gates)
    return accuracy(protonet_logits(theta, episode, metric), episode.query_y)


# training loop ----------------------------------------------------------------

METRIC_BASE = ["step", "mean_ce", "mean_kd"]


def metrics_header(m: int) -> list[str]:
    return (METRIC_BASE + [f"density_{i + 1}" for i in range(m)]
            + [f"lambda_{i + 1}" for i in range(m)]
            + [f"mean_alpha_{i + 1}" for i in range(m)] + ["val_id_acc", "val_ood_acc"])


def metrics_row(metrics: dict, val_id: float | None, val_ood: float | None) -> list[str]:
    def f(x):
        return "" if x is None else repr(float(x))

    return ([str(metrics["step"]), f(metrics["mean_ce"]), f(metrics["mean_kd"])]
            + [f(x) for x in metrics["densities"]] + [f(x) for x in metrics["lambdas"]]
            + [f(x) for x in metrics["mean_alpha"]] + [f(val_id), f(val_ood)])


@dataclass
class TrainResult:
    state: TrainState
    best_state: TrainState
    best_val: float
    rows: list[list[str]]
    header: list[str]


def train(cfg: TrainConfig, theta_pre: ParamSet,
          task_stream: Callable[[int, int], Episode],
          val_id: Sequence[Episode] = (), val_ood: Sequence[Episode] = (),
          state: TrainState | None = None,
          on_step: Callable[[StepResult], None] | None = None) -> TrainResult:
    """Run ``meta_step`` until ``cfg.max_steps``.

    ``task_stream(step, i)`` yields the i-th episode of a step's batch. The
    best state by held-out ID accuracy is kept when ``eval_every > 0``.
    """
    state = state or init_state(theta_pre, cfg)
    header = metrics_header(cfg.n_experts)
    rows: list[list[str]] = []
    best_state, best_val = state.clone(), -np.inf

    def evaluate(s: TrainState) -> tuple[float | None, float | None]:
        gates = fixed_gates(s)
        vi = float(np.mean([direct_accuracy(s, e, cfg.metric, gates) for e in val_id])) if val_id else None
        vo = float(np.mean([direct_accuracy(s, e, cfg.metric, gates) for e in val_ood])) if val_ood else None
        return vi, vo

    if cfg.eval_every and val_id:
        best_val = evaluate(state)[0]
    while state.step < cfg.max_steps:
        batch = [task_stream(state.step, i) for i in range(cfg.batch_tasks)]
        res = meta_step(state, batch, cfg)
        state = res.state
        vi = vo = None
        if cfg.eval_every and (state.step % cfg.eval_every == 0 or state.step == cfg.max_steps):
            vi, vo = evaluate(state)
            if vi is not None and vi > best_val:
                best_val, best_state = vi, state.clone()
        rows.append(metrics_row(res.metrics, vi, vo))
        if on_step is not None:
            on_step(res)
    if not cfg.eval_every or not val_id:
        best_state = state.clone()
    return TrainResult(state, best_state, float(best_val), rows, header)


# dense baseline ---------------------------------------------------------------

def dense_meta_tune(theta: ParamSet, task_stream: Callable[[int, int], Episode], steps: int,
                    lr: float = 1e-3, batch_tasks: int = 2,
                    metric: str = "sqeuclid") -> ParamSet:
    """Plain ProtoNet meta-tuning of every parameter (no masks, no router)."""
    specs = theta.specs
    arrays = [v.data.copy() for v in theta.values]
    opt = Adam(lr)
    for step in range(steps):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        net = ParamSet(specs, leaves)
        with dc.Tape() as tape:
            losses = [ce_loss(protonet_logits(net, ep, metric), ep.query_y)
                      for ep in (task_stream(step, i) for i in range(batch_tasks))]
            loss = dc.sum(dc.concat([dc.reshape(l, (1,)) for l in losses])) / len(losses)
        if not np.isfinite(loss.item()):
            raise dc.NonFiniteError(f"dense meta-tuning diverged at step {step}")
        grads = tape.gradient(loss, leaves)
        arrays = opt.step(arrays, [g.data for g in grads])
    return ParamSet(specs, [Tensor(a) for a in arrays])
