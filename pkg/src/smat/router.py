"""Hypernetwork router: prototypes -> transformer block -> per-expert weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .experts import MergeWeights, normalize
from .fewshot import centroid_matrix
from .params import ParamSet, embed, layer_norm


@dataclass
class RouterParams:
    arrays: dict[str, np.ndarray]
    n_experts: int
    n_heads: int = 2
    gumbel_temp: float = 1.0

    def __post_init__(self):
        if self.gumbel_temp <= 0:
            raise ValueError("gumbel_temp must be positive")
        if self.arrays["head.weight"].shape[1] != self.n_experts:
            raise ValueError("head output width must equal the expert count")

    @property
    def width(self) -> int:
        return self.arrays["head.weight"].shape[0]

    def names(self) -> list[str]:
        return list(self.arrays)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def replace(self, arrays: dict[str, np.ndarray]) -> "RouterParams":
        return RouterParams(dict(arrays), self.n_experts, self.n_heads, self.gumbel_temp)


def init_router(width: int, n_experts: int, rng: np.random.Generator, n_heads: int = 2,
                ff_mult: int = 2, gumbel_temp: float = 1.0, head_bias: float = 0.0) -> RouterParams:
    if width % n_heads:
        raise ValueError("width must be divisible by the head count")
    s = 1.0 / np.sqrt(width)
    ff = ff_mult * width
    arrays = {
        "ln1.scale": np.ones(width), "ln1.shift": np.zeros(width),
        "attn.q": rng.normal(0, s, (width, width)),
        "attn.k": rng.normal(0, s, (width, width)),
        "attn.v": rng.normal(0, s, (width, width)),
        "attn.o": rng.normal(0, s, (width, width)),
        "ln2.scale": np.ones(width), "ln2.shift": np.zeros(width),
        "ff.w1": rng.normal(0, s, (width, ff)), "ff.b1": np.zeros(ff),
        "ff.w2": rng.normal(0, 1.0 / np.sqrt(ff), (ff, width)), "ff.b2": np.zeros(width),
        "head.weight": rng.normal(0, s, (width, n_experts)),
        "head.bias": np.full(n_experts, float(head_bias)),
    }
    return RouterParams(arrays, n_experts, n_heads, gumbel_temp)


def encode_prototypes(encoder: ParamSet, support_x: np.ndarray, support_y: np.ndarray,
                      n_way: int) -> np.ndarray:
    """Class means of frozen-encoder embeddings, ordered by class id."""
    if len(support_x) == 0:
        raise ValueError("support set is empty")
    e = embed(encoder.detach(), np.asarray(support_x, dtype=np.float64)).data
    return centroid_matrix(np.asarray(support_y), n_way) @ e


def router_logits(router: RouterParams, prototypes, weights: dict[str, Tensor] | None = None) -> Tensor:
    """Expert activation logits from one pre-norm attention + feedforward block."""
    w = weights if weights is not None else router.tensors()
    x = dc.as_tensor(prototypes)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need a nonempty (tokens, width) prototype sequence")
    h = layer_norm(x, w["ln1.scale"], w["ln1.shift"])
    q, k, v = h @ w["attn.q"], h @ w["attn.k"], h @ w["attn.v"]
    dh = router.width // router.n_heads
    heads = []
    for i in range(router.n_heads):
        sl = (slice(None), slice(i * dh, (i + 1) * dh))
        att = dc.softmax(q[sl] @ k[sl].T / np.sqrt(dh), axis=-1)
        heads.append(att @ v[sl])
    x = x + dc.concat(heads, axis=1) @ w["attn.o"]
    h = layer_norm(x, w["ln2.scale"], w["ln2.shift"])
    x = x + dc.tanh(h @ w["ff.w1"] + w["ff.b1"]) @ w["ff.w2"] + w["ff.b2"]
    pooled = dc.mean(x, axis=0, keepdims=True)
    return dc.reshape(pooled @ w["head.weight"] + w["head.bias"], (router.n_experts,))


def gumbel_sigmoid(logits: Tensor, u: np.ndarray, temp: float) -> Tensor:
    noise = np.log(u) - np.log1p(-u)
    return dc.sigmoid((logits + noise) / temp)


def route(router: RouterParams, prototypes, rng: np.random.Generator | None = None,
          mode: str = "train", weights: dict[str, Tensor] | None = None,
          temp: float | None = None, logits: Tensor | None = None) -> MergeWeights:
    """Per-task merge weights. ``train`` samples Gumbel-sigmoid activations,
    ``hard`` thresholds ``sigmoid(logit) > 0.5`` without noise."""
    if logits is None:
        logits = router_logits(router, prototypes, weights)
    if mode == "train":
        u = rng.uniform(1e-6, 1.0 - 1e-6, router.n_experts)
        raw = gumbel_sigmoid(logits, u, router.gumbel_temp if temp is None else temp)
    elif mode == "hard":
        raw = Tensor((logits.data > 0.0).astype(np.float64))
    elif mode == "soft":
        raw = dc.sigmoid(logits)
    else:
        raise ValueError(f"unknown routing mode {mode!r}")
    return normalize(raw)


def selection_similarity(mean_alpha: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; zero rows give zero similarity."""
    a = np.asarray(mean_alpha, dtype=np.float64)
    norms = np.linalg.norm(a, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = a / safe[:, None]
    sim = unit @ unit.T
    nz = norms > 0
    sim[~nz, :] = 0.0
    sim[:, ~nz] = 0.0
    np.fill_diagonal(sim, np.where(nz, 1.0, 0.0))
    return sim
