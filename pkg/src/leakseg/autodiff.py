"""Small dense-tensor engine with reverse-mode differentiation.

Every operation takes ``Tensor`` inputs of conforming shape and records a
closure that maps the output gradient to the input gradients. There is no
implicit broadcasting: the only mixed-shape product is scalar-times-tensor
(``scale``), and bias terms are added through an explicit outer product
with a column of ones.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "REGISTERED_OPS",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "relu",
    "softmax",
    "log",
    "abs_",
    "sum_",
    "mean",
    "scale",
    "reshape",
    "backward",
    "grad",
]


class NonFiniteError(ArithmeticError):
    """Raised when a forward pass produces NaN or Inf."""


class Tensor:
    """Immutable float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], tuple] | None = None,
        op: str = "leaf",
    ):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @classmethod
    def _wrap(cls, data: np.ndarray, op: str, parents=(), backward_fn=None) -> "Tensor":
        # engine-owned result arrays: skip the defensive copy
        t = cls.__new__(cls)
        arr = np.asarray(data, dtype=np.float64)
        if arr.flags.owndata and arr.flags.writeable:
            arr.setflags(write=False)
        else:
            arr = np.array(arr)
            arr.setflags(write=False)
        t.data = arr
        t.requires_grad = bool(parents)
        t.grad = None
        t.op = op
        t._parents = parents
        t._backward = backward_fn
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor(np.full(like.shape, float(x)))
    return Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor._wrap(data, op)
    return Tensor._wrap(data, op, parents, backward_fn)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.data, b.data
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    av, bv = a.data, b.data
    if np.any(bv == 0):
        raise NonFiniteError("div: zero in denominator")
    out = av / bv
    return _make(out, (a, b), lambda g: (g / bv, -g * out / bv), "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.data, b.data
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, shifted by the row max."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), back, "softmax")


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; entries below ``floor`` are clipped and get zero gradient."""
    x = a.data
    if floor > 0:
        clipped = x < floor
        xc = np.where(clipped, floor, x)
    else:
        if np.any(x <= 0):
            raise NonFiniteError("log: non-positive input")
        clipped = np.zeros(x.shape, dtype=bool)
        xc = x
    return _make(np.log(xc), (a,), lambda g: (np.where(clipped, 0.0, g / xc),), "log")


def abs_(a: Tensor) -> Tensor:
    # sign(0) = 0 is the subgradient used for the L1 kink
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),), "sum")
    out = a.data.sum(axis=axis)
    return _make(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),), "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


REGISTERED_OPS = (
    "add", "sub", "mul", "div", "matmul", "relu", "softmax",
    "log", "abs", "sum", "mean", "scale", "reshape",
)


# ------------------------------------------------------------------ backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(root: Tensor) -> dict[int, np.ndarray]:
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    if not root.requires_grad:
        return grads
    for node in reversed(_topo_order(root)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return grads


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad and feeds ``root``."""
    grads = _propagate(root)
    for node in _topo_order(root):
        if node.requires_grad and not node._parents:
            node.grad = grads.get(id(node), np.zeros(node.shape))


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``root`` w.r.t. ``wrt``; unreachable inputs get zeros."""
    grads = _propagate(root)
    return [np.array(grads.get(id(t), np.zeros(t.shape))) for t in wrt]
