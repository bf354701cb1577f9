"""Minimal reverse-mode tape over numpy arrays.

The graph is deliberately coarse: composite layers (an LSTM over a whole
sequence, a multi-head attention block, the transducer lattice loss) enter
the tape as single nodes with hand-derived backward functions. This module
owns the node type, the topological backward sweep, and the small pointwise
and linear ops that every layer shares; layer-level backwards live next to
their forwards in `model` and `transducer`.

There is no operator overloading and no broadcasting magic beyond what the
ops below implement; anything fancier gets its own node with an explicit
vector-Jacobian product.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit


class Node:
    """An array value plus the recipe for propagating a gradient to its parents."""

    __slots__ = ("value", "grad", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(shape={np.shape(self.value)}, leaf={self.vjp is None})"


def leaf(value) -> Node:
    return Node(np.asarray(value))


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen = {id(root)}
    stack = [(root, iter(root.parents))]
    while stack:
        node, it = stack[-1]
        for parent in it:
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent.parents)))
                break
        else:
            order.append(node)
            stack.pop()
    return order


def backward(root: Node, seed: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every node reachable from root."""
    root.grad = np.ones_like(root.value) if seed is None else seed
    for node in reversed(_toposort(root)):
        if node.vjp is None or node.grad is None:
            continue
        for parent, grad in zip(node.parents, node.vjp(node.grad)):
            if grad is None:
                continue
            if parent.grad is None:
                parent.grad = grad
            else:
                parent.grad = parent.grad + grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    return Node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def add_n(nodes: list[Node]) -> Node:
    total = nodes[0].value
    for n in nodes[1:]:
        total = total + n.value
    return Node(total, tuple(nodes), lambda g: tuple(g for _ in nodes))


def add_const(a: Node, const) -> Node:
    const = np.asarray(const, dtype=a.value.dtype)
    return Node(a.value + const, (a,), lambda g: (_unbroadcast(g, a.value.shape),))


def mul(a: Node, b: Node) -> Node:
    return Node(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def scale_shift(a: Node, scale: float, shift: float) -> Node:
    scale = a.value.dtype.type(scale)
    shift = a.value.dtype.type(shift)
    return Node(a.value * scale + shift, (a,), lambda g: (g * scale,))


def matmul(a: Node, b: Node) -> Node:
    out = a.value @ b.value

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return Node(out, (a, b), vjp)


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """x @ weight (+ bias) with arbitrary leading dims on x."""
    out = x.value @ weight.value
    if bias is not None:
        out = out + bias.value
    k = weight.value.shape[0]

    def vjp(g):
        gf = g.reshape(-1, g.shape[-1])
        xf = x.value.reshape(-1, k)
        dx = (g @ weight.value.T).reshape(x.value.shape)
        dw = xf.T @ gf
        if bias is None:
            return dx, dw
        return dx, dw, gf.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Node(out, parents, vjp)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------


def sigmoid(a: Node) -> Node:
    y = expit(a.value)
    return Node(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return Node(y, (a,), lambda g: (g * (1.0 - y * y),))


def gelu(a: Node) -> Node:
    x = a.value
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    y = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)

    return Node(y, (a,), vjp)


# ---------------------------------------------------------------------------
# shape and indexing
# ---------------------------------------------------------------------------


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a: Node, ax1: int, ax2: int) -> Node:
    return Node(np.swapaxes(a.value, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(nodes: list[Node], axis: int = -1) -> Node:
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return Node(out, tuple(nodes), lambda g: tuple(np.split(g, splits, axis=axis)))


def index_axis0(a: Node, i: int) -> Node:
    def vjp(g):
        grad = np.zeros_like(a.value)
        grad[i] = g
        return (grad,)

    return Node(a.value[i], (a,), vjp)


def take_rows(table: Node, ids) -> Node:
    """Row gather (embedding lookup); backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.value[ids]

    def vjp(g):
        grad = np.zeros_like(table.value)
        np.add.at(grad, ids, g)
        return (grad,)

    return Node(out, (table,), vjp)


def sum_all(a: Node) -> Node:
    return Node(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, a.value.shape).copy(),))


# ---------------------------------------------------------------------------
# layer normalization (last axis)
# ---------------------------------------------------------------------------


def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    v = x.value
    mean = v.mean(axis=-1, keepdims=True)
    centered = v - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gamma.value * xhat + beta.value

    def vjp(g):
        lead = (-1, v.shape[-1])
        dgamma = (g * xhat).reshape(lead).sum(axis=0)
        dbeta = g.reshape(lead).sum(axis=0)
        dxhat = g * gamma.value
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return Node(out, (x, gamma, beta), vjp)
