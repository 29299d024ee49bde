"""Diagnostics over a trained pool: sparsity, mask overlap, gradient alignment,
expert-selection statistics. Each report is a list of CSV rows with a fixed header.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .experts import ExpertPool, merge_flat
from .fewshot import Episode, episode_meta_loss
from .l0mask import binarize, deterministic_gate, overlap_ratio, prob_nonzero
from .metaopt import TrainState, direct_weights, fixed_gates, make_teacher
from .params import ParamSet
from .router import selection_similarity

SPARSITY_HEADER = ["scope", "layer", "kind", "depth_index", "expert", "sparsity", "density",
                   "std_across_experts"]
OVERLAP_HEADER = ["expert"]  # followed by expert_1..expert_M
ALIGNMENT_HEADER = ["pair", "group", "cosine", "zero_gradient"]
SELECTION_HEADER = ["domain", "n_episodes", "discreteness"]  # + mean_alpha_1..M


def _f(x: float) -> str:
    return repr(float(x))


# sparsity ---------------------------------------------------------------------

@dataclass
class SparsityReport:
    rows: list[list[str]]
    layer_density: np.ndarray      # (M, n_layers)
    expert_density: np.ndarray     # (M,)
    merged_sparsity: float

    header = SPARSITY_HEADER


def sparsity_report(pool: ExpertPool) -> SparsityReport:
    """Expected per-layer sparsity of every expert plus kind/depth aggregates.

    ``merged`` is the expected sparsity of the union of all masks, treating
    gates as independent: an entry is zero only if every expert drops it.
    """
    specs = pool.specs
    sizes = np.array([s.size for s in specs])
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    probs = np.stack([prob_nonzero(m).data for m in pool.masks])     # (M, D)
    seg = np.stack([probs[:, a:b].sum(axis=1) for a, b in zip(bounds[:-1], bounds[1:])], axis=1)
    layer_density = seg / sizes                                         # (M, L)
    expert_density = probs.mean(axis=1)
    merged_sparsity = float(np.prod(1.0 - probs, axis=0).mean())

    rows = []
    for li, s in enumerate(specs):
        std = float(layer_density[:, li].std())
        for m in range(pool.n_experts):
            d = layer_density[m, li]
            rows.append(["layer", s.name, s.kind, str(s.depth_index), str(m + 1),
                         _f(1.0 - d), _f(d), _f(std)])
    for key, label in ((lambda s: s.kind, "kind"), (lambda s: s.depth_index, "depth")):
        groups: dict = {}
        for li, s in enumerate(specs):
            groups.setdefault(key(s), []).append(li)
        for g, idx in groups.items():
            dens = seg[:, idx].sum(axis=1) / sizes[idx].sum()
            std = float(dens.std())
            for m in range(pool.n_experts):
                kind = g if label == "kind" else ""
                depth = str(g) if label == "depth" else ""
                rows.append([label, "", kind, depth, str(m + 1), _f(1.0 - dens[m]),
                             _f(dens[m]), _f(std)])
    for m in range(pool.n_experts):
        d = expert_density[m]
        rows.append(["expert_total", "", "", "", str(m + 1), _f(1.0 - d), _f(d), ""])
    rows.append(["merged", "", "", "", "", _f(merged_sparsity), _f(1.0 - merged_sparsity), ""])
    return SparsityReport(rows, layer_density, expert_density, merged_sparsity)


# overlap ----------------------------------------------------------------------

def mask_overlap_matrix(pool: ExpertPool, threshold: float = 0.5) -> np.ndarray:
    """Pairwise |joint| / |union| of binarized deterministic gates."""
    if pool.n_experts < 1:
        raise ValueError("pool has no experts")
    bins = [binarize(deterministic_gate(m), threshold) for m in pool.masks]
    m = len(bins)
    out = np.zeros((m, m))
    for i in range(m):
        for j in range(i, m):
            out[i, j] = out[j, i] = overlap_ratio(bins[i], bins[j])
    return out


def overlap_rows(mat: np.ndarray) -> tuple[list[str], list[list[str]]]:
    header = OVERLAP_HEADER + [f"expert_{j + 1}" for j in range(len(mat))]
    return header, [[str(i + 1)] + [_f(v) for v in row] for i, row in enumerate(mat)]


# gradient alignment -------------------------------------------------------------

@dataclass
class AlignmentResult:
    delta: np.ndarray             # (pairs,) cosine over the shared modulation
    experts: np.ndarray           # (pairs, M) cosine over each expert's masked view
    zero_flags: np.ndarray        # (pairs, M + 1) bool, column 0 is the delta group

    @property
    def mean_delta(self) -> float:
        return float(self.delta.mean())

    @property
    def mean_experts(self) -> np.ndarray:
        return self.experts.mean(axis=0)


def cosine(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Cosine similarity, or ``(0.0, True)`` when either vector is zero."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    return float(np.dot(a, b) / (na * nb)), False


def meta_gradients(state: TrainState, episode: Episode, beta_w: float = 0.5,
                   temp: float = 2.0, k_teacher: int = 1, lr_teacher: float = 0.1,
                   metric: str = "sqeuclid") -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the episode meta-loss wrt the merged parameters and wrt the
    shared modulation, with noise-free routing and deterministic gates."""
    pool = state.pool
    gates = [g.data for g in fixed_gates(state)]
    alpha = direct_weights(state, episode).alpha.data
    flat = merge_flat(pool.theta_pre.flatten_view(), Tensor(pool.theta_delta.flatten_view()),
                      Tensor(alpha), [Tensor(g) for g in gates]).data
    leaf = Tensor(flat, requires_grad=True)
    with dc.Tape() as tape:
        theta = ParamSet.unflatten(pool.specs, leaf)
        teacher = make_teacher(theta.detach(), episode, k_teacher, lr_teacher, metric)
        loss = episode_meta_loss(theta, teacher, episode, beta_w, temp, metric)
    (g_theta,) = tape.gradient(loss, [leaf])
    weight = sum(a * g for a, g in zip(alpha, gates)) if alpha.any() else np.zeros_like(flat)
    return g_theta.data, g_theta.data * weight


def gradient_alignment(state: TrainState, pairs: Sequence[tuple[Episode, Episode]],
                       **loss_kw) -> AlignmentResult:
    if not pairs:
        raise ValueError("need at least one episode pair")
    gates = [deterministic_gate(m).z.data for m in state.pool.masks]
    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def grads(ep):
        if id(ep) not in cache:
            cache[id(ep)] = meta_gradients(state, ep, **loss_kw)
        return cache[id(ep)]

    deltas, experts, flags = [], [], []
    for a, b in pairs:
        ga, da = grads(a)
        gb, db = grads(b)
        c, z = cosine(da, db)
        row, frow = [], [z]
        for g in gates:
            ce, ze = cosine(ga * g, gb * g)
            row.append(ce)
            frow.append(ze)
        deltas.append(c)
        experts.append(row)
        flags.append(frow)
    return AlignmentResult(np.array(deltas), np.array(experts), np.array(flags))


def alignment_rows(res: AlignmentResult) -> list[list[str]]:
    rows = []
    for p in range(len(res.delta)):
        rows.append([str(p), "delta", _f(res.delta[p]), str(int(res.zero_flags[p, 0]))])
        for m in range(res.experts.shape[1]):
            rows.append([str(p), f"expert_{m + 1}", _f(res.experts[p, m]),
                         str(int(res.zero_flags[p, m + 1]))])
    rows.append(["mean", "delta", _f(res.mean_delta), ""])
    for m, v in enumerate(res.mean_experts):
        rows.append(["mean", f"expert_{m + 1}", _f(v), ""])
    return rows


# selection statistics -------------------------------------------------------------

@dataclass
class SelectionStats:
    domains: list[str]
    counts: list[int]
    mean_alpha: np.ndarray        # (domains, M)
    discreteness: np.ndarray      # (domains,)
    overall_discreteness: float
    similarity: np.ndarray        # (domains, domains)


def _columns(row: dict, prefix: str) -> list[float]:
    keys = sorted((k for k in row if k.startswith(prefix)), key=lambda k: int(k[len(prefix):]))
    return [float(row[k]) for k in keys]


def selection_stats(log: Iterable[dict]) -> SelectionStats:
    """Per-domain statistics from per-episode evaluation rows.

    Rows need ``domain``, ``alpha_1..M`` and ``raw_1..M`` (pre-normalization
    activations). Discreteness is the mean of ``min(raw, 1 - raw)``.
    """
    groups: dict[str, tuple[list, list]] = {}
    for row in log:
        a, r = _columns(row, "alpha_"), _columns(row, "raw_")
        g = groups.setdefault(row["domain"], ([], []))
        g[0].append(a)
        g[1].append(r)
    if not groups:
        raise ValueError("evaluation log is empty")
    domains = sorted(groups)
    mean_alpha = np.array([np.mean(groups[d][0], axis=0) for d in domains])
    disc = np.array([np.mean(np.minimum(groups[d][1], 1.0 - np.asarray(groups[d][1])))
                     for d in domains])
    all_raw = np.concatenate([np.asarray(groups[d][1]).reshape(-1) for d in domains])
    overall = float(np.mean(np.minimum(all_raw, 1.0 - all_raw)))
    return SelectionStats(domains, [len(groups[d][0]) for d in domains], mean_alpha, disc,
                          overall, selection_similarity(mean_alpha))


def selection_rows(st: SelectionStats) -> tuple[list[str], list[list[str]]]:
    m = st.mean_alpha.shape[1]
    header = (SELECTION_HEADER + [f"mean_alpha_{i + 1}" for i in range(m)]
              + [f"sim_{d}" for d in st.domains])
    rows = []
    for i, d in enumerate(st.domains):
        rows.append([d, str(st.counts[i]), _f(st.discreteness[i])]
                    + [_f(v) for v in st.mean_alpha[i]] + [_f(v) for v in st.similarity[i]])
    rows.append(["ALL", str(sum(st.counts)), _f(st.overall_discreteness)] + [""] * (m + len(st.domains)))
    return header, rows


def read_eval_log(path) -> list[dict]:
    """Per-episode rows of an evaluation CSV (summary rows skipped)."""
    with open(path, newline="") as fh:
        return [r for r in csv.DictReader(fh) if r["task_id"].isdigit()]


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
