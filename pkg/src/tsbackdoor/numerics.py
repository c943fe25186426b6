"""Reverse-mode differentiation over dense float64 arrays.

Every trainable piece of the package (forecasters, trigger generators, the
attack losses, the stealth autoencoder) is written against :class:`Node`.
Gradients are obtained with :func:`eval_backward`, checked with
:func:`fd_check` and applied with :class:`Adam`.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NumericError

ACTIVATIONS = ("softsign", "tanh", "relu", "exp")


class Node:
    """One value in a computation graph."""

    __slots__ = ("value", "parents", "backward", "op")
    __array_ufunc__ = None  # ndarray <op> Node defers to the Node's reflected method

    def __init__(self, value, parents=(), backward=None, op="leaf"):
        self.value = value
        self.parents = parents
        self.backward = backward
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

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
        if isinstance(other, Node):
            raise ContractViolation("division by a Node is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def var(value) -> Node:
    """Leaf node for a parameter or input."""
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value in leaf")
    return Node(arr)


def const(value) -> Node:
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value, dtype=np.float64))


def _node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _make(value, parents, backward, op) -> Node:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced by op '{op}'")
    return Node(value, parents, backward, op)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Node:
    a, b = _node(a), _node(b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Node:
    a, b = _node(a), _node(b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Node:
    a, b = _node(a), _node(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def matmul(a, b) -> Node:
    a, b = _node(a), _node(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ContractViolation(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(av @ bv, (a, b), back, "matmul")


def square(a) -> Node:
    a = _node(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def absolute(a) -> Node:
    # subgradient convention: sign(0) = 0
    a = _node(a)
    av = a.value
    return _make(np.abs(av), (a,), lambda g: (np.sign(av) * g,), "abs")


# --- activations ------------------------------------------------------------

def softsign(a) -> Node:
    a = _node(a)
    denom = 1.0 + np.abs(a.value)
    return _make(a.value / denom, (a,), lambda g: (g / (denom * denom),), "softsign")


def tanh(a) -> Node:
    a = _node(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Node:
    a = _node(a)
    on = a.value > 0
    return _make(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,), "relu")


def exp(a) -> Node:
    a = _node(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    if not np.all(np.isfinite(out)):
        raise NumericError("overflow in op 'exp'")
    return _make(out, (a,), lambda g: (g * out,), "exp")


_ACT_FN = {"softsign": softsign, "tanh": tanh, "relu": relu, "exp": exp}


def activation(x, kind: str):
    """Apply an elementwise activation to an array or a Node.

    Arrays in give arrays out (no graph is recorded); Nodes give Nodes.
    """
    if kind not in _ACT_FN:
        raise ContractViolation(f"unknown activation {kind!r}")
    if isinstance(x, Node):
        return _ACT_FN[kind](x)
    return _ACT_FN[kind](const(x)).value


# --- shape and indexing -----------------------------------------------------

def transpose(a, axes=None) -> Node:
    a = _node(a)
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape) -> Node:
    a = _node(a)
    old = a.value.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, index) -> Node:
    """Basic or fancy indexing; repeated indices accumulate in the backward pass."""
    a = _node(a)
    shape = a.value.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), back, "take")


def scatter_add(a, shape, index) -> Node:
    """Zeros of ``shape`` with ``a`` added at ``index`` (inverse of :func:`take`)."""
    a = _node(a)
    out = np.zeros(shape)
    np.add.at(out, index, a.value)
    return _make(out, (a,), lambda g: (g[index],), "scatter_add")


def concat(parts: Sequence, axis=-1) -> Node:
    parts = [_node(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([p.value for p in parts], axis=axis), tuple(parts),
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def reduce_sum(a, axis=None) -> Node:
    a = _node(a)
    shape = a.value.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.value.sum(axis=axis)), (a,), back, "sum")


def reduce_mean(a, axis=None) -> Node:
    a = _node(a)
    n = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis) * (1.0 / n)


# --- backward pass ----------------------------------------------------------

def _topo_order(root: Node):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def eval_backward(expr: Node, params: Sequence[Node]) -> list[np.ndarray]:
    """Gradients of a scalar expression with respect to ``params``."""
    if expr.value.size != 1:
        raise ContractViolation(f"backward needs a scalar root, got shape {expr.value.shape}")
    grads = {id(expr): np.ones_like(expr.value)}
    for node in reversed(_topo_order(expr)):
        g = grads.get(id(node))
        if g is None or node.backward is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericError(f"non-finite gradient in backward of op '{node.op}'")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return [grads.get(id(p), np.zeros_like(p.value)) for p in params]


def fd_check(build: Callable[..., Node], params: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Worst relative disagreement between analytic and central-difference gradients.

    ``build`` receives one Node per entry of ``params`` and returns a scalar Node.
    """
    if step <= 0:
        raise ContractViolation("step must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    nodes = [var(p) for p in params]
    analytic = eval_backward(build(*nodes), nodes)

    def f(values):
        return float(build(*[const(v) for v in values]).value)

    worst = 0.0
    for k, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][idx] += step
            minus[k][idx] -= step
            numeric = (f(plus) - f(minus)) / (2.0 * step)
            a = analytic[k][idx]
            denom = max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


# --- optimizer --------------------------------------------------------------

class Adam:
    """Bias-corrected moment optimizer. ``step`` returns new parameter arrays."""

    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params, grads):
        if len(params) != len(grads):
            raise ContractViolation("params and grads differ in length")
        for p, g in zip(params, grads):
            if np.shape(p) != np.shape(g):
                raise ContractViolation(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)}")
        if self.m is None:
            self.m = [np.zeros_like(p, dtype=np.float64) for p in params]
            self.v = [np.zeros_like(p, dtype=np.float64) for p in params]
        elif any(m.shape != np.shape(p) for m, p in zip(self.m, params)):
            raise ContractViolation("parameter shapes changed between steps")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            out.append(p - update)
        return out

    def state_dict(self):
        return {"t": self.t,
                "m": None if self.m is None else [m.tolist() for m in self.m],
                "v": None if self.v is None else [v.tolist() for v in self.v]}
