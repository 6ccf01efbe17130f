"""Reverse-mode differentiation over numpy arrays.

Each :class:`Var` holds a float64 array, its parents, and a closure that pushes
the upstream gradient into those parents. Calling :meth:`Var.backward` on a
scalar walks the graph in reverse topological order.

Kinks follow the left-branch convention: ``positive_part(z)`` has slope 1 at
``z == 0`` and ``maximum(a, b)`` routes the gradient to ``a`` on ties, so the
derivative of ``(R - x)^+`` at ``x == R`` is ``-1``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from mfg_forge.errors import ContractError

__all__ = [
    "Var",
    "as_var",
    "concat",
    "exp",
    "maximum",
    "positive_part",
    "relu",
    "sigmoid",
    "softplus",
    "square",
    "tanh",
    "value_and_grad",
]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Var:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "_owns_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Var, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._owns_grad = False

    # -- graph plumbing --------------------------------------------------
    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g
            self._owns_grad = False
        else:
            self.grad = self.grad + g
            self._owns_grad = True

    def _grad_buffer(self) -> np.ndarray:
        """Writable gradient buffer owned by this node (for in-place scatter)."""
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif not self._owns_grad:
            self.grad = np.array(self.grad, dtype=np.float64, copy=True)
        self._owns_grad = True
        return self.grad

    def backward(self) -> None:
        if self.value.size != 1:
            raise ContractError(f"backward() needs a scalar output, got shape {self.value.shape}")
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- array-ish interface ---------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_var(other)))

    def __rsub__(self, other):
        return add(as_var(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return mul(as_var(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_var(other), self)

    def __pow__(self, p):
        if isinstance(p, Var) or np.ndim(p) != 0:
            raise ContractError("only constant scalar exponents are supported")
        if p == 2:
            return square(self)
        return power(self, float(p))

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    # numpy dispatch: ``ndarray <op> Var`` and ``np.tanh(Var)`` land here
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs.get("out") is not None:
            raise ContractError(f"unsupported primitive: {ufunc.__name__}.{method}")
        fn = _UFUNCS.get(ufunc)
        if fn is None:
            raise ContractError(f"unsupported primitive: {ufunc.__name__}")
        return fn(*inputs)


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    if isinstance(x, (np.ndarray, float, int, np.floating, np.integer)):
        if np.iscomplexobj(x):
            raise ContractError("complex values are not supported")
        return Var(x)
    raise ContractError(f"unsupported operand type {type(x).__name__}")


def _make(value: np.ndarray, parents: Sequence[Var], backward) -> Var:
    out = Var(value)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


# -- elementwise binary ----------------------------------------------------
def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), bw)


def subtract(a, b) -> Var:
    return add(a, neg(as_var(b)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), bw)


def divide(a, b) -> Var:
    return mul(a, reciprocal(as_var(b)))


def maximum(a, b) -> Var:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_var(a), as_var(b)
    left = a.value >= b.value

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.where(left, g, 0.0), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.where(left, 0.0, g), b.shape))

    return _make(np.maximum(a.value, b.value), (a, b), bw)


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ContractError("matmul needs at least 1-d operands")

    def bw(g):
        av, bv = a.value, b.value
        if a.requires_grad:
            if bv.ndim == 1:
                ga = np.multiply.outer(g, bv)
            else:
                ga = g @ np.swapaxes(bv, -1, -2) if av.ndim > 1 else bv @ g
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if av.ndim == 1:
                gb = np.multiply.outer(av, g)
            elif bv.ndim == 1:
                gb = np.swapaxes(av, -1, -2) @ g[..., None]
                gb = gb[..., 0]
            else:
                gb = np.swapaxes(av, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.shape))

    return _make(a.value @ b.value, (a, b), bw)


# -- elementwise unary -----------------------------------------------------
def neg(a) -> Var:
    a = as_var(a)
    return _make(-a.value, (a,), lambda g: a._accum(-g))


def reciprocal(a) -> Var:
    a = as_var(a)
    out = 1.0 / a.value
    return _make(out, (a,), lambda g: a._accum(-g * out * out))


def square(a) -> Var:
    a = as_var(a)
    return _make(a.value * a.value, (a,), lambda g: a._accum(2.0 * g * a.value))


def power(a, p: float) -> Var:
    a = as_var(a)
    return _make(a.value**p, (a,), lambda g: a._accum(g * p * a.value ** (p - 1.0)))


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: a._accum(g * (1.0 - out * out)))


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0.0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: a._accum(np.where(mask, g, 0.0)))


def positive_part(a) -> Var:
    """``max(a, 0)`` with slope 1 at the kink."""
    a = as_var(a)
    mask = a.value >= 0.0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: a._accum(np.where(mask, g, 0.0)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Var:
    a = as_var(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: a._accum(g * out * (1.0 - out)))


def softplus(a) -> Var:
    a = as_var(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: a._accum(g * _sigmoid(x)))


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: a._accum(g * out))


def log1p(a) -> Var:
    a = as_var(a)
    return _make(np.log1p(a.value), (a,), lambda g: a._accum(g / (1.0 + a.value)))


# -- reductions and shape ops ----------------------------------------------
def sum_(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, shape))

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: a._accum(g.reshape(old)))


def transpose(a) -> Var:
    a = as_var(a)
    return _make(np.swapaxes(a.value, -1, -2), (a,), lambda g: a._accum(np.swapaxes(g, -1, -2)))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Var:
    a = as_var(a)
    basic = _is_basic_index(idx)

    def bw(g):
        buf = a._grad_buffer()
        if basic:
            buf[idx] += g
        else:
            np.add.at(buf, idx, g)

    return _make(a.value[idx], (a,), bw)


def concat(parts: Iterable, axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accum(g[tuple(sl)])

    return _make(np.concatenate([p.value for p in parts], axis=axis), parts, bw)


def dense(x, theta, offset: int, fan_in: int, fan_out: int, activation: str | None = None) -> Var:
    """``act(x @ W + b)`` with ``W``, ``b`` read in place from flat ``theta``.

    ``W`` occupies ``theta[offset : offset + fan_in * fan_out]`` (row-major,
    shape ``(fan_in, fan_out)``) and ``b`` the following ``fan_out`` entries.
    """
    x, theta = as_var(x), as_var(theta)
    w_hi = offset + fan_in * fan_out
    W = theta.value[offset:w_hi].reshape(fan_in, fan_out)
    b = theta.value[w_hi : w_hi + fan_out]
    z = x.value @ W + b
    if activation is None:
        out = z
    elif activation == "tanh":
        out = np.tanh(z)
    elif activation == "relu":
        out = np.maximum(z, 0.0)
    elif activation == "sigmoid":
        out = _sigmoid(z)
    else:
        raise ContractError(f"unsupported activation {activation!r}")

    def bw(g):
        if activation == "tanh":
            g = g * (1.0 - out * out)
        elif activation == "relu":
            g = np.where(z > 0.0, g, 0.0)
        elif activation == "sigmoid":
            g = g * out * (1.0 - out)
        if theta.requires_grad:
            buf = theta._grad_buffer()
            xv = x.value
            if xv.ndim == 1:
                buf[offset:w_hi] += np.multiply.outer(xv, g).ravel()
                buf[w_hi : w_hi + fan_out] += g
            else:
                buf[offset:w_hi] += (xv.T @ g).ravel()
                buf[w_hi : w_hi + fan_out] += g.sum(axis=0)
        if x.requires_grad:
            x._accum(g @ W.T)

    return _make(out, (x, theta), bw)


_UFUNCS = {
    np.add: add,
    np.subtract: subtract,
    np.multiply: mul,
    np.true_divide: divide,
    np.negative: neg,
    np.matmul: matmul,
    np.maximum: maximum,
    np.tanh: tanh,
    np.square: square,
    np.exp: exp,
    np.log1p: log1p,
    np.reciprocal: reciprocal,
}


def value_and_grad(fn: Callable[[Var], Var], x) -> tuple[float, np.ndarray]:
    """Evaluate scalar ``fn`` at ``x`` and return ``(value, d fn / d x)``."""
    leaf = Var(np.array(x, dtype=np.float64, copy=True), requires_grad=True)
    out = fn(leaf)
    if not isinstance(out, Var):
        raise ContractError("loss must be built from differentiable primitives (got a plain value)")
    if out.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {out.value.shape}")
    out.backward()
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return float(out.value.reshape(())), np.array(grad, dtype=np.float64)
