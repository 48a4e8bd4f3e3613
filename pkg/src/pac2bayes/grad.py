"""Reverse-mode differentiation on a recorded tape.

Every function here dispatches on its inputs: given plain numpy values it
just computes the result, given at least one :class:`Var` it also records a
node so :func:`evaluate_with_gradient` can run the backward pass.  Objective
code is therefore written once and evaluated either way, and the forward
values are bit-identical in both modes.

Node values are numpy arrays (0-d for scalars).  Elementwise ops broadcast
with numpy rules; adjoints are summed back to the parent shape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

PRIMITIVES = (
    "leaf", "add", "sub", "mul", "div", "neg", "exp", "log", "softplus",
    "tanh", "square", "maximum", "logsumexp", "sum", "index", "stack",
    "stop_gradient",
)


class NumericFailure(ArithmeticError):
    """A node produced a non-finite value or adjoint."""

    def __init__(self, kind: str, where: str = "forward"):
        super().__init__(f"non-finite {where} value at node '{kind}'")
        self.kind = kind
        self.where = where


class Tape:
    """Nodes in creation order, which is a topological order."""

    def __init__(self):
        self.nodes: list[Var] = []

    def __len__(self):
        return len(self.nodes)


class Var:
    __slots__ = ("value", "grad", "kind", "parents", "tape")
    __array_priority__ = 1000  # make ndarray <op> Var defer to Var

    def __init__(self, value, kind="leaf", parents=(), tape=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.kind = kind
        self.parents = parents  # tuple of (parent Var, vjp callable)
        self.tape = tape if tape is not None else Tape()
        self.tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var({self.kind}, shape={self.shape})"

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

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)


def value(x):
    """Raw numpy value of a graph value or constant."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _record(val, kind, parents):
    tape = _tape_of(*(p for p, _ in parents))
    if not np.all(np.isfinite(val)):
        raise NumericFailure(kind)
    return Var(val, kind, tuple(parents), tape)


def _binary(a, b, val, kind, ga, gb):
    parents = []
    if isinstance(a, Var):
        shape = a.shape
        parents.append((a, lambda g: _unbroadcast(ga(g), shape)))
    if isinstance(b, Var):
        shape_b = b.shape
        parents.append((b, lambda g: _unbroadcast(gb(g), shape_b)))
    return _record(val, kind, parents)


def _is_graph(*xs):
    return any(isinstance(x, Var) for x in xs)


# elementwise ---------------------------------------------------------------

def add(a, b):
    if not _is_graph(a, b):
        return np.add(a, b)
    return _binary(a, b, value(a) + value(b), "add", lambda g: g, lambda g: g)


def sub(a, b):
    if not _is_graph(a, b):
        return np.subtract(a, b)
    return _binary(a, b, value(a) - value(b), "sub", lambda g: g, lambda g: -g)


def mul(a, b):
    if not _is_graph(a, b):
        return np.multiply(a, b)
    va, vb = value(a), value(b)
    return _binary(a, b, va * vb, "mul", lambda g: g * vb, lambda g: g * va)


def div(a, b):
    if not _is_graph(a, b):
        return np.divide(a, b)
    va, vb = value(a), value(b)
    out = va / vb
    return _binary(a, b, out, "div", lambda g: g / vb, lambda g: -g * out / vb)


def neg(a):
    if not _is_graph(a):
        return np.negative(a)
    return _record(-a.value, "neg", [(a, lambda g: -g)])


def exp(a):
    if not _is_graph(a):
        return np.exp(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _record(out, "exp", [(a, lambda g: g * out)])


def log(a):
    if not _is_graph(a):
        return np.log(a)
    va = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(va)
    return _record(out, "log", [(a, lambda g: g / va)])


def softplus(a):
    """ln(1 + e^z) in the overflow-safe form max(z, 0) + ln(1 + e^-|z|)."""
    if not _is_graph(a):
        a = np.asarray(a, dtype=float)
        return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
    va = a.value
    out = np.maximum(va, 0.0) + np.log1p(np.exp(-np.abs(va)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * va))
    return _record(out, "softplus", [(a, lambda g: g * sig)])


def tanh(a):
    if not _is_graph(a):
        return np.tanh(a)
    out = np.tanh(a.value)
    return _record(out, "tanh", [(a, lambda g: g * (1.0 - out * out))])


def square(a):
    if not _is_graph(a):
        return np.multiply(a, a)
    va = a.value
    return _record(va * va, "square", [(a, lambda g: 2.0 * g * va)])


def maximum(a, b):
    """Elementwise max; on ties the whole adjoint goes to ``a``."""
    if not _is_graph(a, b):
        return np.maximum(a, b)
    va, vb = value(a), value(b)
    first = va >= vb
    return _binary(a, b, np.where(first, va, vb), "maximum",
                   lambda g: g * first, lambda g: g * ~first)


# reductions ----------------------------------------------------------------

def sum_(a, axis=None):
    if not _is_graph(a):
        return np.sum(a, axis=axis)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _record(np.sum(a.value, axis=axis), "sum", [(a, vjp)])


def mean(a, axis=None):
    n = value(a).size if axis is None else value(a).shape[axis]
    return div(sum_(a, axis), float(n))


def logsumexp(a, axis=None):
    """ln Σ e^a with the max shifted out, so |a| up to ~1e300 is fine."""
    va = value(a)
    m = np.max(va, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(va - m), axis=axis, keepdims=True)
    out_keep = m + np.log(s)
    out = np.squeeze(out_keep, axis=axis) if axis is not None else out_keep.reshape(())
    if not _is_graph(a):
        return out
    weights = np.exp(va - out_keep)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return g * weights

    return _record(out, "logsumexp", [(a, vjp)])


# structure -----------------------------------------------------------------

def index(a, idx):
    if not _is_graph(a):
        return np.asarray(a)[idx]
    shape = a.shape
    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def vjp(g):
        out = np.zeros(shape)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] += g
        return out

    return _record(a.value[idx], "index", [(a, vjp)])


def stack(items: Sequence, axis=-1):
    if not _is_graph(*items):
        return np.stack([np.asarray(i, dtype=float) for i in items], axis=axis)
    vals = [value(i) for i in items]
    out = np.stack(vals, axis=axis)
    parents = []
    for k, item in enumerate(items):
        if isinstance(item, Var):
            parents.append((item, lambda g, k=k: np.take(g, k, axis=axis)))
    return _record(out, "stack", parents)


def stop_gradient(a):
    """Identity forward; the backward pass sees a constant."""
    if not _is_graph(a):
        return np.asarray(a, dtype=float)
    return Var(a.value, "stop_gradient", (), a.tape)


# driver --------------------------------------------------------------------

def backward(root: Var, leaf: Var):
    if root.value.size != 1:
        raise ValueError(f"objective must be scalar, got shape {root.shape}")
    root.grad = np.ones_like(root.value)
    for node in reversed(root.tape.nodes):
        g = node.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericFailure(node.kind, "adjoint")
        for parent, vjp in node.parents:
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib
    if leaf.grad is None:
        return np.zeros_like(leaf.value)
    return np.array(leaf.grad, dtype=float)


def evaluate_with_gradient(builder: Callable, params) -> tuple[float, np.ndarray]:
    """Value and gradient of ``builder(leaf)`` with respect to ``params``."""
    params = np.array(getattr(params, "values", params), dtype=float)
    leaf = Var(params, "leaf")
    out = builder(leaf)
    if not isinstance(out, Var):  # builder ignored its input
        val = float(np.asarray(out).reshape(()))
        if not np.isfinite(val):
            raise NumericFailure("constant")
        return val, np.zeros_like(params)
    grad = backward(out, leaf)
    return float(out.value.reshape(())), grad


def evaluate(builder: Callable, params) -> float:
    """Forward value only, no tape."""
    params = np.array(getattr(params, "values", params), dtype=float)
    out = np.asarray(builder(params), dtype=float)
    if out.size != 1:
        raise ValueError(f"objective must be scalar, got shape {out.shape}")
    if not np.isfinite(out).all():
        raise NumericFailure("output")
    return float(out.reshape(()))


# gradient checking ---------------------------------------------------------

def finite_difference_gradient(fn: Callable, params, step: float = 1e-5) -> np.ndarray:
    """Central differences of a plain numpy function of a flat vector."""
    params = np.array(params, dtype=float)
    grad = np.empty_like(params)
    flat = params.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = float(fn(params))
        flat[i] = old - step
        down = float(fn(params))
        flat[i] = old
        g[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_gradient(builder: Callable, params, step: float = 1e-5, oracle: Callable | None = None) -> float:
    """Relative error between the tape gradient and central differences.

    ``oracle`` is the function differentiated numerically; it defaults to
    the builder run without recording.  Pass an independent implementation
    when the builder contains stop-gradients, since finite differences of
    the builder itself would differentiate through them.
    """
    _, grad = evaluate_with_gradient(builder, params)
    fd = finite_difference_gradient(oracle or builder, np.asarray(params, dtype=float), step)
    return relative_error(grad, fd)
