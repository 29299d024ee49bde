"""Minimal reverse-mode differentiation over dense float64 arrays.

Operations on :class:`Tensor` objects are recorded on the active :class:`Tape`
whenever at least one input requires a gradient. ``Tape.gradient`` replays the
record in reverse and returns adjoints for the requested tensors.

>>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
>>> with Tape() as tape:
...     loss = (x * x).sum()
>>> tape.gradient(loss, [x])[0].data
array([2., 4., 6.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "ShapeError",
    "as_tensor",
    "grad",
    "finite_difference_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "sqrt",
    "square",
    "softmax",
    "log_softmax",
    "mean",
    "sum",
    "clamp",
    "concat",
    "reshape",
    "transpose",
    "custom_op",
    "backward_count",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised on incompatible operand shapes."""


_local = threading.local()
_backward_counter = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward_count() -> int:
    """Number of backward passes run on this thread so far."""
    return getattr(_backward_counter, "n", 0)


class Tensor:
    """Immutable float64 array with an optional gradient requirement."""

    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # skips the copy; callers hand over fresh arrays only
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _raise_not_scalar():
    raise ShapeError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class Tape:
    """Ordered record of primitive ops. Single use, confined to one thread."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._used = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
        """Adjoints of scalar ``loss`` with respect to each tensor in ``wrt``.

        Tensors the loss does not depend on receive zero adjoints.
        """
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        _backward_counter.n = backward_count() + 1
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node.output), None)
            if g is None:
                continue
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adj:
                    adj[key] = adj[key] + gi
                else:
                    adj[key] = gi
        out = []
        for w in wrt:
            g = adj.get(id(w))
            if g is None:
                g = np.zeros_like(w.data)
            out.append(Tensor._wrap(np.asarray(g, dtype=np.float64).reshape(w.shape), False))
        return out


def grad(loss: Tensor, wrt: Sequence[Tensor], tape: Tape) -> dict[int, Tensor]:
    """Map ``id(tensor) -> adjoint`` for every tensor in ``wrt``."""
    return {id(w): g for w, g in zip(wrt, tape.gradient(loss, wrt))}


def _check_finite(arr: np.ndarray, name: str) -> None:
    # a finite sum implies finite entries; only the rare overflow case rescans
    if not np.isfinite(np.add.reduce(arr, axis=None)) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} produced non-finite values")


def _make(name: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(out, name)
    needs = False
    for t in inputs:
        if t.requires_grad:
            needs = True
            break
    tape = _active_tape() if needs else None
    result = Tensor._wrap(np.asarray(out), needs and tape is not None)
    if result.requires_grad:
        tape.record(_Node(inputs, result, vjp, name))
    return result


def custom_op(name: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Register a fused primitive. ``vjp(g)`` returns one adjoint per input."""
    return _make(name, out, tuple(inputs), vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(name: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from e


# elementwise binary ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", _binary("add", np.add, a, b), (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("sub", _binary("sub", np.subtract, a, b), (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", _binary("mul", np.multiply, a, b), (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _binary("div", np.divide, a, b)

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


# unary ----------------------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _make("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        r = np.sqrt(a.data)
    return _make("sqrt", r, (a,), lambda g: (g * 0.5 / r,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``. Subgradient is 1 strictly inside, 0 elsewhere."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _make("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# reductions / softmax ---------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make("sum", np.asarray(out), (a,),
                 lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.size // max(np.asarray(out).size, 1)
    return _make("mean", np.asarray(out), (a,),
                 lambda g: (np.array(_expand(g, a.shape, axis, keepdims)) / n,))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make("log_softmax", out, (a,),
                 lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", p, (a,),
                 lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


# structure ------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from e
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {e}") from e
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make("transpose", a.data.T, (a,), lambda g: (g.T,))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data[index])

    basic = isinstance(index, (slice, int)) or (
        isinstance(index, tuple) and all(isinstance(i, (slice, int)) for i in index))

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("getitem", out, (a,), vjp)


# gradient checking ------------------------------------------------------------

def finite_difference_check(
    f: Callable[[list[Tensor]], Tensor],
    point: Sequence[np.ndarray],
    h: float = 1e-5,
    mask: Sequence[np.ndarray] | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a list of tensors to a scalar tensor. ``mask`` marks entries to
    compare (``True`` = include); the rest are skipped, e.g. near clamp kinks.
    Relative error per entry is ``|a - b| / max(|a|, |b|, floor)``.
    """
    point = [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(p, requires_grad=True) for p in point]
    with Tape() as tape:
        loss = f(leaves)
    analytic = [g.data for g in tape.gradient(loss, leaves)]
    worst = 0.0
    for k, p in enumerate(point):
        flat = p.reshape(-1)
        for j in range(flat.size):
            if mask is not None and not mask[k].reshape(-1)[j]:
                continue
            plus = [q.copy() for q in point]
            minus = [q.copy() for q in point]
            plus[k].reshape(-1)[j] += h
            minus[k].reshape(-1)[j] -= h
            fp = f([Tensor(q) for q in plus]).item()
            fm = f([Tensor(q) for q in minus]).item()
            fd = (fp - fm) / (2 * h)
            a = analytic[k].reshape(-1)[j]
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            worst = max(worst, err)
    return worst
