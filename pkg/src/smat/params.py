"""Layer-addressed parameter sets and the desk-scale backbone family."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

KINDS = ("embedding", "linear_weight", "linear_bias", "norm_scale", "norm_shift")


class SpecMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    shape: tuple[int, ...]
    depth_index: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.depth_index < 0:
            raise ValueError("depth_index must be >= 0")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _check_specs(specs: Sequence[LayerSpec]) -> tuple[LayerSpec, ...]:
    specs = tuple(specs)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("layer names must be unique")
    depths = [s.depth_index for s in specs]
    if depths != sorted(depths):
        raise ValueError("depth_index must follow declaration order")
    return specs


class ParamSet:
    """Ordered named tensors. Immutable; arithmetic returns new sets."""

    __slots__ = ("specs", "values")

    def __init__(self, specs: Sequence[LayerSpec], values: Sequence[Tensor]):
        specs = _check_specs(specs)
        values = tuple(dc.as_tensor(v) for v in values)
        if len(values) != len(specs):
            raise SpecMismatch(f"{len(specs)} specs but {len(values)} values")
        for s, v in zip(specs, values):
            if tuple(v.shape) != s.shape:
                raise SpecMismatch(f"{s.name}: expected shape {s.shape}, got {v.shape}")
        self.specs = specs
        self.values = values

    @property
    def total_dim(self) -> int:
        return sum(s.size for s in self.specs)

    def __getitem__(self, name: str) -> Tensor:
        for s, v in zip(self.specs, self.values):
            if s.name == name:
                return v
        raise KeyError(name)

    def __iter__(self):
        return iter(zip(self.specs, self.values))

    def _same(self, other: "ParamSet") -> None:
        if self.specs != other.specs:
            raise SpecMismatch("parameter sets have different specs")

    def map(self, fn) -> "ParamSet":
        return ParamSet(self.specs, [fn(v) for v in self.values])

    def flatten_view(self) -> np.ndarray:
        if not self.values:
            return np.zeros(0)
        return np.concatenate([v.data.reshape(-1) for v in self.values])

    def flatten(self) -> Tensor:
        """Differentiable flat concatenation."""
        return dc.concat([dc.reshape(v, (-1,)) for v in self.values])

    @classmethod
    def unflatten(cls, specs: Sequence[LayerSpec], flat) -> "ParamSet":
        """Inverse of ``flatten``; differentiable when ``flat`` is a Tensor on a tape."""
        specs = tuple(specs)
        flat = dc.as_tensor(flat)
        total = sum(s.size for s in specs)
        if flat.ndim != 1 or flat.shape[0] != total:
            raise SpecMismatch(f"expected flat vector of length {total}, got shape {flat.shape}")
        values, off = [], 0
        for s in specs:
            values.append(dc.reshape(flat[off:off + s.size], s.shape))
            off += s.size
        return cls(specs, values)

    def detach(self) -> "ParamSet":
        return ParamSet(self.specs, [v.detach() for v in self.values])

    def requiring_grad(self) -> "ParamSet":
        return ParamSet(self.specs, [Tensor(v.data, requires_grad=True) for v in self.values])

    def equals(self, other: "ParamSet") -> bool:
        return self.specs == other.specs and all(
            np.array_equal(a.data, b.data) for a, b in zip(self.values, other.values))

    def __repr__(self) -> str:
        return f"ParamSet({len(self.specs)} layers, total_dim={self.total_dim})"


def zeros_like(x: ParamSet) -> ParamSet:
    return ParamSet(x.specs, [Tensor(np.zeros(s.shape)) for s in x.specs])


def ones_like(x: ParamSet) -> ParamSet:
    return ParamSet(x.specs, [Tensor(np.ones(s.shape)) for s in x.specs])


def axpy(a: float, x: ParamSet, y: ParamSet) -> ParamSet:
    x._same(y)
    return ParamSet(x.specs, [dc.add(dc.mul(a, xv), yv) for xv, yv in zip(x.values, y.values)])


def hadamard(x: ParamSet, y: ParamSet) -> ParamSet:
    x._same(y)
    return ParamSet(x.specs, [dc.mul(xv, yv) for xv, yv in zip(x.values, y.values)])


def from_flat_array(specs: Sequence[LayerSpec], flat: np.ndarray) -> ParamSet:
    return ParamSet.unflatten(specs, Tensor(np.asarray(flat, dtype=np.float64)))


# backbone ---------------------------------------------------------------------

@dataclass(frozen=True)
class Architecture:
    """Embedding layer, ``depth`` linear+norm+tanh blocks, output projection."""

    input_dim: int = 16
    hidden: int = 32
    depth: int = 2
    embed_dim: int = 16

    def specs(self) -> tuple[LayerSpec, ...]:
        out = [
            LayerSpec("embed.weight", "embedding", (self.input_dim, self.hidden), 0),
            LayerSpec("embed.bias", "linear_bias", (self.hidden,), 0),
        ]
        for d in range(1, self.depth + 1):
            out += [
                LayerSpec(f"block{d}.linear.weight", "linear_weight", (self.hidden, self.hidden), d),
                LayerSpec(f"block{d}.linear.bias", "linear_bias", (self.hidden,), d),
                LayerSpec(f"block{d}.norm.scale", "norm_scale", (self.hidden,), d),
                LayerSpec(f"block{d}.norm.shift", "norm_shift", (self.hidden,), d),
            ]
        out += [
            LayerSpec("proj.weight", "linear_weight", (self.hidden, self.embed_dim), self.depth + 1),
            LayerSpec("proj.bias", "linear_bias", (self.embed_dim,), self.depth + 1),
        ]
        return tuple(out)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": self.hidden,
                "depth": self.depth, "embed_dim": self.embed_dim}


def init_backbone(arch: Architecture, rng: np.random.Generator) -> ParamSet:
    values = []
    for s in arch.specs():
        if s.kind in ("embedding", "linear_weight"):
            values.append(Tensor(rng.normal(0.0, 1.0 / np.sqrt(s.shape[0]), s.shape)))
        elif s.kind == "norm_scale":
            values.append(Tensor(np.ones(s.shape)))
        else:
            values.append(Tensor(np.zeros(s.shape)))
    return ParamSet(arch.specs(), values)


def layer_norm(h: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Fused row-wise layer normalization with affine scale and shift."""
    h, scale, shift = dc.as_tensor(h), dc.as_tensor(scale), dc.as_tensor(shift)
    c = h.data - h.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((c * c).mean(axis=-1, keepdims=True) + eps)
    xhat = c * inv
    lead = tuple(range(h.ndim - 1))

    def vjp(g):
        gx = g * scale.data
        gh = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gh, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return dc.custom_op("layer_norm", xhat * scale.data + shift.data, [h, scale, shift], vjp)


def layer_norm_composed(h: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    mu = dc.mean(h, axis=-1, keepdims=True)
    c = h - mu
    var = dc.mean(dc.square(c), axis=-1, keepdims=True)
    return c / dc.sqrt(var + eps) * scale + shift


def embed(params: ParamSet, x) -> Tensor:
    """Backbone output embedding for inputs ``x`` of shape (n, input_dim)."""
    vals = dict(zip((s.name for s in params.specs), params.values))
    h = dc.matmul(dc.as_tensor(x), vals["embed.weight"]) + vals["embed.bias"]
    d = 1
    while f"block{d}.linear.weight" in vals:
        p = f"block{d}"
        a = dc.matmul(h, vals[p + ".linear.weight"]) + vals[p + ".linear.bias"]
        h = dc.tanh(layer_norm(a, vals[p + ".norm.scale"], vals[p + ".norm.shift"]))
        d += 1
    return dc.matmul(h, vals["proj.weight"]) + vals["proj.bias"]
