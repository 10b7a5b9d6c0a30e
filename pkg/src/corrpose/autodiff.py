"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays and record a tape of parent links as ops
are applied.  Calling :func:`backward` on a scalar result walks the tape in
reverse topological order and deposits gradients on every tensor that
requires them.  A graph is consumed by its backward pass; building a fresh
forward graph per step is the intended usage.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class GraphConsumedError(RuntimeError):
    """backward() was already run through this node."""


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    # one fused reduction; s - s is NaN (!= 0) iff the sum is NaN or +-Inf
    s = data.sum()
    if s - s != 0.0:
        raise NonFiniteError(f"{op} produced non-finite values")
    return data


class Tensor:
    """Dense float64 array node in a computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all semantics live in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[tuple[Tensor, Callable]], op: str) -> Tensor:
    _check_finite(data, op)
    out = object.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    recorded = tuple((p, fn) for p, fn in parents if p.requires_grad)
    out.requires_grad = bool(recorded)
    out._parents = recorded
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and broadcast ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        [(a, lambda g: _unbroadcast(g, a.data.shape)),
         (b, lambda g: _unbroadcast(g, b.data.shape))],
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        [(a, lambda g: _unbroadcast(g, a.data.shape)),
         (b, lambda g: _unbroadcast(-g, b.data.shape))],
        "sub",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, [(a, lambda g: -g)], "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        [(a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
         (b, lambda g: _unbroadcast(g * a.data, b.data.shape))],
        "mul",
    )


def div(a, b) -> Tensor:
    return mul(a, pow_const(as_tensor(b), -1.0))


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = a.data ** p

    def grad_a(g):
        d = p * a.data ** (p - 1.0)
        if p < 1.0:
            # subgradient 0 where the derivative blows up at the origin
            d = np.where(a.data == 0.0, 0.0, d)
        return g * d

    return _result(out, [(a, grad_a)], "pow_const")


def square(a) -> Tensor:
    return pow_const(a, 2.0)


def sqrt(a) -> Tensor:
    return pow_const(a, 0.5)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.maximum(a.data, 0.0), [(a, lambda g: g * (a.data > 0.0))], "relu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only through the interior."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    return _result(
        out,
        [(a, lambda g: g * ((a.data > lo) & (a.data < hi)))],
        "clip",
    )


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _result(out, [(a, lambda g: g * out * (1.0 - out))], "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, [(a, lambda g: g * out)], "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, [(a, lambda g: g / a.data)], "log")


# ---------------------------------------------------------------------------
# linear algebra and structure ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")
    return _result(
        a.data @ b.data,
        [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)],
        "matmul",
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.T.copy(), [(a, lambda g: g.T)], "transpose")


def reshape(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape).copy(), [(a, lambda g: g.reshape(a.data.shape))], "reshape")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _result(
        np.array([[a.data.sum()]]),
        [(a, lambda g: np.full(a.data.shape, g.reshape(-1)[0]))],
        "sum_all",
    )


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _result(
        a.data.sum(axis=axis, keepdims=True),
        [(a, lambda g: np.broadcast_to(g, a.data.shape).copy())],
        "sum_axis",
    )


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return mul(sum_all(a), 1.0 / a.data.size)


def softmax_rows(m) -> Tensor:
    """Row-wise softmax with max-subtraction; each output row sums to 1."""
    m = as_tensor(m)
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def grad_m(g):
        return out * (g - (g * out).sum(axis=1, keepdims=True))

    return _result(out, [(m, grad_m)], "softmax_rows")


def concat_rows(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_grad(i):
        return lambda g: g[offsets[i]:offsets[i + 1]]

    return _result(
        np.concatenate([p.data for p in parts], axis=0),
        [(p, make_grad(i)) for i, p in enumerate(parts)],
        "concat_rows",
    )


def concat_cols(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_grad(i):
        return lambda g: g[:, offsets[i]:offsets[i + 1]]

    return _result(
        np.concatenate([p.data for p in parts], axis=1),
        [(p, make_grad(i)) for i, p in enumerate(parts)],
        "concat_cols",
    )


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def grad_a(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return full

    return _result(a.data[start:stop].copy(), [(a, grad_a)], "slice_rows")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def grad_a(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return full

    return _result(a.data[:, start:stop].copy(), [(a, grad_a)], "slice_cols")


def gather_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def grad_a(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return full

    return _result(a.data[idx].copy(), [(a, grad_a)], "gather_rows")


def tile_rows(a, n: int) -> Tensor:
    """Repeat a 1xC row n times."""
    a = as_tensor(a)
    if a.data.shape[0] != 1:
        raise ShapeError("tile_rows expects a single row")
    return _result(
        np.repeat(a.data, n, axis=0),
        [(a, lambda g: g.sum(axis=0, keepdims=True))],
        "tile_rows",
    )


def max_axis0(a) -> Tensor:
    """Column-wise max as a 1xC row; ties route the gradient to the first row."""
    a = as_tensor(a)
    idx = a.data.argmax(axis=0)

    def grad_a(g):
        full = np.zeros_like(a.data)
        full[idx, np.arange(a.data.shape[1])] = g[0]
        return full

    return _result(a.data.max(axis=0, keepdims=True), [(a, grad_a)], "max_axis0")


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from loss.

    The traversed graph is consumed: a second backward through any of its
    interior nodes raises GraphConsumedError.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward already ran on this graph")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._consumed:
            raise GraphConsumedError("graph node reused after backward")
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._parents:
            for parent, fn in node._parents:
                pg = fn(g)
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
            node._consumed = True
            node._parents = ()
    loss._consumed = True
