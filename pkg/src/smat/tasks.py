"""Synthetic episodic domains with controllable shift, and backbone pre-training.

Each domain draws class centres in a low-dimensional signal subspace, pads
them with high-variance nuisance coordinates, then maps the latent point
through a domain-specific invertible affine map and pointwise warp. A good
embedding must discard the nuisance directions, which differ per domain.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .fewshot import Episode, ce_loss, one_hot, protonet_logits, accuracy
from .optim import Adam
from .params import Architecture, ParamSet, embed, init_backbone

log = logging.getLogger(__name__)

KINDS = ("gaussian-clusters", "ring-clusters", "warped-clusters")
WARPS = ("none", "tanh", "sin")
SPLITS = {"train": 0, "val": 1, "test": 2}
WHICH = {"id": 0, "ood": 1}
CATALOG_VERSION = "1"


@dataclass(frozen=True)
class DomainSpec:
    name: str
    kind: str
    matrix: tuple[tuple[float, ...], ...]
    offset: tuple[float, ...]
    warp: str
    noise_scale: float
    input_dim: int
    class_pool_size: int
    signal_dim: int
    nuisance_scale: float
    center_seed: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.warp not in WARPS:
            raise ValueError(f"unknown warp {self.warp!r}")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")
        a = np.array(self.matrix)
        if a.shape != (self.input_dim, self.input_dim):
            raise ValueError("transform must be square in input_dim")
        if abs(np.linalg.det(a)) < 1e-8:
            raise ValueError("affine part of the transform must be nonsingular")

    @property
    def A(self) -> np.ndarray:
        return np.array(self.matrix)


@dataclass(frozen=True)
class SuiteSpec:
    name: str
    id_domains: tuple[DomainSpec, ...]
    ood_domains: tuple[DomainSpec, ...]
    n_way_range: tuple[int, int] = (5, 5)
    k_shot_range: tuple[int, int] = (1, 5)
    q_query: int = 5
    seed: int = 0
    class_split: tuple[float, float] = (0.6, 0.2)
    version: str = CATALOG_VERSION

    def __post_init__(self):
        ids = {d.name for d in self.id_domains}
        if not self.id_domains:
            raise ValueError("suite needs ID domains")
        if ids & {d.name for d in self.ood_domains}:
            raise ValueError("OOD domain names must not appear among ID domains")
        lo, hi = self.n_way_range
        if not 2 <= lo <= hi:
            raise ValueError("invalid n_way range")
        lo, hi = self.k_shot_range
        if not 1 <= lo <= hi:
            raise ValueError("invalid k_shot range")
        if self.q_query < 1:
            raise ValueError("q_query must be >= 1")
        for d in (*self.id_domains, *self.ood_domains):
            n_val, n_test = _split_sizes(d.class_pool_size, self.class_split)[1:]
            if min(n_val, n_test) < self.n_way_range[1]:
                raise ValueError(f"{d.name}: class pool too small for n_way")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteSpec":
        def dom(x):
            x = dict(x)
            x["matrix"] = tuple(tuple(float(v) for v in row) for row in x["matrix"])
            x["offset"] = tuple(float(v) for v in x["offset"])
            return DomainSpec(**x)

        d = dict(d)
        d["id_domains"] = tuple(dom(x) for x in d["id_domains"])
        d["ood_domains"] = tuple(dom(x) for x in d["ood_domains"])
        for k in ("n_way_range", "k_shot_range", "class_split"):
            d[k] = tuple(d[k])
        return cls(**d)

    def domain(self, name: str) -> DomainSpec:
        for d in (*self.id_domains, *self.ood_domains):
            if d.name == name:
                return d
        raise KeyError(name)


def _split_sizes(pool: int, frac: tuple[float, float]) -> tuple[int, int, int]:
    n_train = int(round(pool * frac[0]))
    n_val = int(round(pool * frac[1]))
    return n_train, n_val, pool - n_train - n_val


@lru_cache(maxsize=64)
def _centers(kind: str, pool: int, signal_dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    c = rng.normal(0.0, 1.0, (pool, signal_dim))
    if kind == "ring-clusters":
        c = 1.5 * c / np.linalg.norm(c, axis=1, keepdims=True)
    elif kind == "warped-clusters":
        c = c + 0.5 * np.sin(2.0 * c)
    return c


def _warp(x: np.ndarray, warp: str) -> np.ndarray:
    if warp == "tanh":
        return x + 0.5 * np.tanh(x)
    if warp == "sin":
        return x + 0.3 * np.sin(x)
    return x


def generate_points(dom: DomainSpec, classes: np.ndarray, per_class: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``per_class`` inputs for each global class id in ``classes``; labels are positions."""
    centers = _centers(dom.kind, dom.class_pool_size, dom.signal_dim, dom.center_seed)
    n = len(classes) * per_class
    labels = np.repeat(np.arange(len(classes)), per_class)
    latent = np.empty((n, dom.input_dim))
    latent[:, :dom.signal_dim] = centers[classes[labels]] + dom.noise_scale * rng.normal(
        size=(n, dom.signal_dim))
    latent[:, dom.signal_dim:] = dom.nuisance_scale * rng.normal(
        size=(n, dom.input_dim - dom.signal_dim))
    x = _warp(latent @ dom.A.T + np.array(dom.offset), dom.warp)
    if not np.isfinite(x).all():
        raise FloatingPointError("generator produced non-finite inputs")
    return x, labels


def split_classes(spec: SuiteSpec, dom: DomainSpec, split: str) -> np.ndarray:
    n_train, n_val, _ = _split_sizes(dom.class_pool_size, spec.class_split)
    perm = np.random.default_rng([dom.center_seed, 11]).permutation(dom.class_pool_size)
    if split == "train":
        return perm[:n_train]
    if split == "val":
        return perm[n_train:n_train + n_val]
    return perm[n_train + n_val:]


def sample_episode(spec: SuiteSpec, split: str, which: str, index: int,
                   domain: str | None = None, n_way: int | None = None,
                   k_shot: int | None = None) -> Episode:
    """Deterministic in ``(spec.seed, split, which, index)`` (and ``domain`` if pinned)."""
    if split not in SPLITS or which not in WHICH:
        raise ValueError(f"invalid split/which: {split}/{which}")
    if which == "ood" and split == "train":
        raise ValueError("OOD episodes exist only for val and test")
    pool = spec.ood_domains if which == "ood" else spec.id_domains
    if not pool:
        raise ValueError(f"suite has no {which} domains")
    rng = np.random.default_rng([spec.seed, SPLITS[split], WHICH[which], index])
    dom = pool[rng.integers(len(pool))]
    if domain is not None:
        dom = spec.domain(domain)
    n_way = n_way or int(rng.integers(spec.n_way_range[0], spec.n_way_range[1] + 1))
    k_shot = k_shot or int(rng.integers(spec.k_shot_range[0], spec.k_shot_range[1] + 1))
    avail = split_classes(spec, dom, split)
    chosen = rng.choice(avail, size=n_way, replace=False)
    x, y = generate_points(dom, chosen, k_shot + spec.q_query, rng)
    s_mask = np.zeros(len(y), dtype=bool)
    for c in range(n_way):
        s_mask[np.flatnonzero(y == c)[:k_shot]] = True
    return Episode(x[s_mask], y[s_mask], x[~s_mask], y[~s_mask], n_way,
                   domain=dom.name, is_ood=which == "ood",
                   meta={"split": split, "index": index, "k_shot": k_shot})


def episode_to_dict(ep: Episode) -> dict:
    return {
        "domain": ep.domain, "is_ood": ep.is_ood, "n_way": ep.n_way,
        "support_x": ep.support_x.tolist(), "support_y": ep.support_y.tolist(),
        "query_x": ep.query_x.tolist(),
        "query_y": None if ep.query_y is None else ep.query_y.tolist(),
    }


def episode_from_dict(d: dict) -> Episode:
    return Episode(np.array(d["support_x"]), np.array(d["support_y"]), np.array(d["query_x"]),
                   None if d["query_y"] is None else np.array(d["query_y"]), d["n_way"],
                   domain=d["domain"], is_ood=d["is_ood"])


# catalog ---------------------------------------------------------------------

def _rotation(rng: np.random.Generator, n: int, angle: float, base: np.ndarray) -> np.ndarray:
    """``expm(angle * S) @ base`` for a random unit skew-symmetric ``S``."""
    g = rng.normal(size=(n, n))
    s = g - g.T
    s /= np.linalg.norm(s, 2)
    w, v = np.linalg.eig(angle * s)
    rot = (v @ np.diag(np.exp(w)) @ np.linalg.inv(v)).real
    return rot @ base


def transform_distance(a: DomainSpec, b: DomainSpec) -> float:
    return float(np.linalg.norm(a.A - b.A) / np.sqrt(a.input_dim))


MIN_OOD_DISTANCE = 0.3


def _md_mini(version: str) -> SuiteSpec:
    dim, signal = 16, 6
    rng = np.random.default_rng([2024, int(version)])
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    base = q * 1.0
    kinds = ["gaussian-clusters", "ring-clusters", "warped-clusters", "gaussian-clusters",
             "ring-clusters", "warped-clusters", "gaussian-clusters"]
    warps = ["none", "tanh", "sin", "tanh", "sin", "none", "tanh"]
    angles = [0.25, 0.25, 0.25, 0.25, 0.9, 0.9, 0.9]
    names = ["alpha", "bravo", "charlie", "delta", "ood-echo", "ood-foxtrot", "ood-golf"]
    doms = []
    for i, (name, kind, warp, ang) in enumerate(zip(names, kinds, warps, angles)):
        a = _rotation(rng, dim, ang, base)
        a = np.round(a, 12)
        doms.append(DomainSpec(
            name=name, kind=kind,
            matrix=tuple(tuple(float(v) for v in row) for row in a),
            offset=tuple(float(v) for v in np.round(rng.normal(0, 0.2, dim), 12)),
            warp=warp, noise_scale=0.45, input_dim=dim, class_pool_size=40,
            signal_dim=signal, nuisance_scale=2.5, center_seed=1000 * int(version) + i,
        ))
    spec = SuiteSpec("md-mini", tuple(doms[:4]), tuple(doms[4:]), (5, 5), (1, 5), 5, 0)
    for o in spec.ood_domains:
        for d in spec.id_domains:
            if transform_distance(o, d) < MIN_OOD_DISTANCE:
                raise AssertionError(f"{o.name} too close to {d.name}")
    return spec


def suite_catalog(version: str = CATALOG_VERSION) -> dict[str, SuiteSpec]:
    return {"md-mini": _md_mini(version)}


def get_suite(name: str, seed: int | None = None) -> SuiteSpec:
    spec = suite_catalog()[name]
    if seed is not None and seed != spec.seed:
        spec = SuiteSpec.from_dict({**spec.to_dict(), "seed": seed})
    return spec


# pre-training ----------------------------------------------------------------

@dataclass
class PretrainConfig:
    arch: Architecture = field(default_factory=Architecture)
    steps: int = 150
    lr: float = 3e-3
    batch: int = 64
    seed: int = 0
    embed_penalty: float = 0.1


def pooled_training_data(spec: SuiteSpec, per_class: int, rng: np.random.Generator):
    xs, ys, offset = [], [], 0
    for dom in spec.id_domains:
        classes = split_classes(spec, dom, "train")
        x, y = generate_points(dom, classes, per_class, rng)
        xs.append(x)
        ys.append(y + offset)
        offset += len(classes)
    return np.concatenate(xs), np.concatenate(ys), offset


def pretrain_backbone(spec: SuiteSpec, cfg: PretrainConfig) -> ParamSet:
    """Supervised training on pooled ID training classes with a throwaway head."""
    rng = np.random.default_rng([cfg.seed, 31])
    body = init_backbone(cfg.arch, rng)
    x_all, y_all, n_classes = pooled_training_data(spec, 50, rng)
    head_w = rng.normal(0, 1.0 / np.sqrt(cfg.arch.embed_dim), (cfg.arch.embed_dim, n_classes))
    head_b = np.zeros(n_classes)
    arrays = [v.data.copy() for v in body.values] + [head_w, head_b]
    opt = Adam(cfg.lr)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(y_all), cfg.batch)
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        net = ParamSet(body.specs, leaves[:-2])
        with dc.Tape() as tape:
            e = embed(net, x_all[idx])
            loss = ce_loss(e @ leaves[-2] + leaves[-1], y_all[idx])
            if cfg.embed_penalty:
                # keeps embedding norms, hence distance logits, moderate
                loss = loss + cfg.embed_penalty * dc.mean(dc.sum(dc.square(e), axis=1))
        if not np.isfinite(loss.item()):
            raise dc.NonFiniteError(f"pre-training diverged at step {step}")
        grads = tape.gradient(loss, leaves)
        arrays = opt.step(arrays, [g.data for g in grads])
    return ParamSet(body.specs, [Tensor(a) for a in arrays[:-2]])


def protonet_accuracy(net: ParamSet, spec: SuiteSpec, split: str, which: str,
                      n_episodes: int, start: int = 0, metric: str = "sqeuclid") -> float:
    accs = []
    frozen = net.detach()
    for i in range(start, start + n_episodes):
        ep = sample_episode(spec, split, which, i)
        accs.append(accuracy(protonet_logits(frozen, ep, metric), ep.query_y))
    return float(np.mean(accs))
