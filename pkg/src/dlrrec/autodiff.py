"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` that returns the output array plus whatever it needs for the
backward pass, and a ``backward`` that maps the upstream gradient onto one
gradient per input. Calling ``Op.apply(...)`` records a node; the graph is
rebuilt on every forward pass, so there is no persistent tape object.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

_node_ids = itertools.count()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` are the parameters that
    :func:`backward` reports gradients for.
    """

    __slots__ = ("value", "requires_grad", "op", "parents", "ctx", "id", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op: type[Function] | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx: dict = {}
        self.id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        label = self.name or (self.op.__name__ if self.op else "leaf")
        return f"Tensor({label}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """Base class for recorded operations."""

    @staticmethod
    def forward(ctx: dict, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: dict, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx: dict = {}
        out = Tensor(cls.forward(ctx, *(t.value for t in tensors), **kwargs))
        if any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out.op = cls
            out.parents = tensors
            out.ctx = ctx
        return out


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        return grad @ ctx["b"].T, ctx["a"].T @ grad


class Add(Function):
    """Elementwise sum; a 1-D right operand is added to every row of a matrix."""

    @staticmethod
    def forward(ctx, a, b):
        if a.shape != b.shape and not (a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]):
            raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
        ctx["row_broadcast"] = a.shape != b.shape
        return a + b

    @staticmethod
    def backward(ctx, grad):
        if ctx["row_broadcast"]:
            return grad, grad.sum(axis=0)
        return grad, grad


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx["b"], grad * ctx["a"]


class Scale(Function):
    @staticmethod
    def forward(ctx, a, factor: float):
        ctx["factor"] = factor
        return a * factor

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["factor"],)


class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, grad):
        return (-grad,)


class Relu(Function):
    @staticmethod
    def forward(ctx, a):
        ctx["mask"] = a > 0
        return np.where(ctx["mask"], a, 0.0)

    @staticmethod
    def backward(ctx, grad):
        return (np.where(ctx["mask"], grad, 0.0),)


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, a):
        out = _sigmoid(a)
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, grad):
        s = ctx["out"]
        return (grad * s * (1.0 - s),)


class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["out"],)


class Log(Function):
    @staticmethod
    def forward(ctx, a):
        if np.any(a <= 0):
            raise DomainError(f"log: non-positive input (min {a.min()!r})")
        ctx["a"] = a
        return np.log(a)

    @staticmethod
    def backward(ctx, grad):
        return (grad / ctx["a"],)


class Softplus(Function):
    """log(1 + exp(x)), evaluated without overflow."""

    @staticmethod
    def forward(ctx, a):
        ctx["a"] = a
        return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))

    @staticmethod
    def backward(ctx, grad):
        return (grad * _sigmoid(ctx["a"]),)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _check_axis(a: np.ndarray, axis):
    if axis is not None and not (0 <= axis < a.ndim):
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")


class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis=None):
        _check_axis(a, axis)
        ctx["shape"], ctx["axis"] = a.shape, axis
        return a.sum(axis=axis)

    @staticmethod
    def backward(ctx, grad):
        if ctx["axis"] is not None:
            grad = np.expand_dims(grad, ctx["axis"])
        return (np.broadcast_to(grad, ctx["shape"]).copy(),)


class Mean(Function):
    @staticmethod
    def forward(ctx, a, axis=None):
        _check_axis(a, axis)
        ctx["shape"], ctx["axis"] = a.shape, axis
        ctx["count"] = a.size if axis is None else a.shape[axis]
        return a.mean(axis=axis)

    @staticmethod
    def backward(ctx, grad):
        if ctx["axis"] is not None:
            grad = np.expand_dims(grad, ctx["axis"])
        return (np.broadcast_to(grad / ctx["count"], ctx["shape"]).copy(),)


class LogSumExp(Function):
    @staticmethod
    def forward(ctx, a, axis=None):
        _check_axis(a, axis)
        m = a.max(axis=axis, keepdims=True)
        shifted = np.exp(a - m)
        total = shifted.sum(axis=axis, keepdims=True)
        ctx["softmax"] = shifted / total
        ctx["axis"] = axis
        out = np.log(total) + m
        return out.reshape(()) if axis is None else np.squeeze(out, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        if ctx["axis"] is not None:
            grad = np.expand_dims(grad, ctx["axis"])
        return (grad * ctx["softmax"],)


class GatherRows(Function):
    @staticmethod
    def forward(ctx, table, indices: np.ndarray):
        if table.ndim != 2:
            raise ShapeError(f"gather_rows needs a 2-D table, got {table.shape}")
        bad = np.flatnonzero((indices < 0) | (indices >= table.shape[0]))
        if bad.size:
            raise IndexError(f"gather_rows: index {int(indices[bad[0]])} out of range for {table.shape[0]} rows")
        ctx["indices"], ctx["shape"] = indices, table.shape
        return table[indices]

    @staticmethod
    def backward(ctx, grad):
        idx = ctx["indices"]
        out = np.zeros(ctx["shape"])
        if idx.size == 0:
            return (out,)
        # scatter-add: stable sort, then sum each run of equal indices in order
        order = np.argsort(idx, kind="stable")
        uniq, starts = np.unique(idx[order], return_index=True)
        out[uniq] = np.add.reduceat(grad[order], starts, axis=0)
        return (out,)


class Concat(Function):
    """Column-wise concatenation of 2-D tensors with equal row counts."""

    @staticmethod
    def forward(ctx, *arrays):
        rows = {a.shape[0] for a in arrays}
        if len(rows) != 1 or any(a.ndim != 2 for a in arrays):
            raise ShapeError(f"concat: incompatible shapes {[a.shape for a in arrays]}")
        ctx["splits"] = np.cumsum([a.shape[1] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=1)

    @staticmethod
    def backward(ctx, grad):
        return tuple(np.split(grad, ctx["splits"], axis=1))


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx["shape"] = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx["shape"]),)


class NormalizeRows(Function):
    """Scale every row to unit L2 norm."""

    @staticmethod
    def forward(ctx, a, eps: float = 1e-12):
        norm = np.maximum(np.sqrt((a * a).sum(axis=1, keepdims=True)), eps)
        out = a / norm
        ctx["out"], ctx["norm"] = out, norm
        return out

    @staticmethod
    def backward(ctx, grad):
        y = ctx["out"]
        return ((grad - y * (grad * y).sum(axis=1, keepdims=True)) / ctx["norm"],)


class Dropout(Function):
    @staticmethod
    def forward(ctx, a, keep: np.ndarray, rate: float):
        ctx["mult"] = keep / (1.0 - rate)
        return a * ctx["mult"]

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["mult"],)


# name -> op class; the gradient checker iterates over this
OPS: dict[str, type[Function]] = {
    "matmul": MatMul,
    "add": Add,
    "mul": Mul,
    "scale": Scale,
    "neg": Neg,
    "relu": Relu,
    "sigmoid": Sigmoid,
    "exp": Exp,
    "log": Log,
    "softplus": Softplus,
    "sum": Sum,
    "mean": Mean,
    "logsumexp": LogSumExp,
    "gather_rows": GatherRows,
    "concat": Concat,
    "reshape": Reshape,
    "normalize_rows": NormalizeRows,
    "dropout": Dropout,
}


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def scale(a, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def neg(a) -> Tensor:
    return Neg.apply(a)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def relu(a) -> Tensor:
    return Relu.apply(a)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


def exp(a) -> Tensor:
    return Exp.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


def softplus(a) -> Tensor:
    return Softplus.apply(a)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis)


def mean(a, axis: int | None = None) -> Tensor:
    return Mean.apply(a, axis=axis)


def logsumexp(a, axis: int | None = None) -> Tensor:
    return LogSumExp.apply(a, axis=axis)


def gather_rows(table, indices: Sequence[int] | np.ndarray) -> Tensor:
    return GatherRows.apply(table, indices=np.asarray(indices, dtype=np.int64))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    return Concat.apply(*tensors)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def normalize_rows(a) -> Tensor:
    return NormalizeRows.apply(a)


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Identity in eval mode or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(np.float64)
    return Dropout.apply(x, keep=keep, rate=rate)


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``root`` with respect to every reachable leaf.

    Returns a map from leaf tensor to gradient array; leaves the root does
    not depend on are absent. Nodes are swept in decreasing creation order,
    which is a reverse topological order, so accumulation is deterministic.
    """
    if root.value.size != 1 or root.value.ndim > 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}

    nodes: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in nodes:
            continue
        nodes[t.id] = t
        stack.extend(p for p in t.parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
    leaves: dict[Tensor, np.ndarray] = {}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t.op is None:
            leaves[t] = g
            continue
        for parent, pg in zip(t.parents, t.op.backward(t.ctx, g)):
            if not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"{t.op.__name__}.backward gave {pg.shape} for input {parent.shape}")
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return leaves
