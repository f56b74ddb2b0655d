"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough machinery for the segmenter: a tape of Tensor nodes built by
elementwise/matrix ops, walked once in reverse topological order by
``backward``. Everything runs in float64; gradients are exact (no numeric
differentiation anywhere in this module).

Conventions:
  - broadcasting follows numpy; backward sums gradients over broadcast axes
  - ``relu``/``clip`` use the zero subgradient at their kinks
  - ``softmax``/``log_softmax`` shift by the detached row max, which leaves
    both value and gradient mathematically unchanged
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "bwd", "requires_grad")

    # make ndarray <op> Tensor defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, value, parents=(), bwd=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.bwd = bwd
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, grad={'set' if self.grad is not None else 'none'})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(value) -> Tensor:
    """Leaf tensor that accumulates gradient."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value + b.value, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    out.bwd = bwd
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.value, (a,))
    out.bwd = lambda g: _accum(a, -g)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value * b.value, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    out.bwd = bwd
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value / b.value, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g / b.value, a.value.shape))
        _accum(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    out.bwd = bwd
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value @ b.value, (a, b))

    def bwd(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    out.bwd = bwd
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.value.T, (a,))
    out.bwd = lambda g: _accum(a, g.T)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    old = a.value.shape
    out = Tensor(a.value.reshape(shape), (a,))
    out.bwd = lambda g: _accum(a, g.reshape(old))
    return out


def tanh(a: Tensor) -> Tensor:
    v = np.tanh(a.value)
    out = Tensor(v, (a,))
    out.bwd = lambda g: _accum(a, g * (1.0 - v * v))
    return out


def sigmoid(a: Tensor) -> Tensor:
    v = np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-a.value)),
                 np.exp(a.value) / (1.0 + np.exp(a.value)))
    out = Tensor(v, (a,))
    out.bwd = lambda g: _accum(a, g * v * (1.0 - v))
    return out


def exp(a: Tensor) -> Tensor:
    v = np.exp(a.value)
    out = Tensor(v, (a,))
    out.bwd = lambda g: _accum(a, g * v)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.value), (a,))
    out.bwd = lambda g: _accum(a, g / a.value)
    return out


def sqrt(a: Tensor) -> Tensor:
    v = np.sqrt(a.value)
    out = Tensor(v, (a,))
    # zero gradient at the singular point instead of inf
    out.bwd = lambda g: _accum(a, g * np.where(v > 0, 0.5 / np.where(v > 0, v, 1.0), 0.0))
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.value, 0.0), (a,))
    out.bwd = lambda g: _accum(a, g * (a.value > 0))
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only strictly inside (lo, hi)."""
    out = Tensor(np.clip(a.value, lo, hi), (a,))
    inside = (a.value > lo) & (a.value < hi)
    out.bwd = lambda g: _accum(a, g * inside)
    return out


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,))

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.value.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.value.shape).copy())

    out.bwd = bwd
    return out


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.value.size if axis is None else a.value.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def softmax(a: Tensor, axis=-1) -> Tensor:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    v = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(v, (a,))

    def bwd(g):
        dot = (g * v).sum(axis=axis, keepdims=True)
        _accum(a, v * (g - dot))

    out.bwd = bwd
    return out


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    m = a.value.max(axis=axis, keepdims=True)
    shifted = a.value - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    v = shifted - lse
    out = Tensor(v, (a,))

    def bwd(g):
        soft = np.exp(v)
        _accum(a, g - soft * g.sum(axis=axis, keepdims=True))

    out.bwd = bwd
    return out


def gather_rows(a: Tensor, rows) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)
    out = Tensor(a.value[rows], (a,))

    def bwd(g):
        if not a.requires_grad:
            return
        acc = np.zeros_like(a.value)
        np.add.at(acc, rows, g)
        _accum(a, acc)

    out.bwd = bwd
    return out


def gather(a: Tensor, rows, cols) -> Tensor:
    """Pick scalar entries (rows[i], cols[i]) from a 2-D tensor."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = Tensor(a.value[rows, cols], (a,))

    def bwd(g):
        if not a.requires_grad:
            return
        acc = np.zeros_like(a.value)
        np.add.at(acc, (rows, cols), g)
        _accum(a, acc)

    out.bwd = bwd
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.value.shape != ():
        raise ValueError("backward expects a scalar loss")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)
