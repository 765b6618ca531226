"""Dense float64 arithmetic with an explicit reverse-mode record.

Values are plain ``numpy`` arrays (2-D matrices, or stacks of them with
leading batch axes). Recording is opt-in: wrap an array with
:meth:`DiffGraph.leaf` and every operation below that touches the
resulting :class:`Node` is appended to the same graph. Operations on
plain arrays just compute values.

Example::

    g = DiffGraph()
    x = g.leaf(np.ones((2, 3)))
    y = sum_all(mul(x, x))
    dx = gradient(g, y, x)      # == 2 * x
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

Matrix = np.ndarray

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    pass


class GraphError(ValueError):
    pass


class NumericError(ArithmeticError):
    """A computation produced NaN or infinity."""


def check_finite(name: str, *arrays) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in {name}")


class Node:
    """A recorded value. ``backward`` maps the output adjoint to input adjoints."""

    __slots__ = ("graph", "index", "value", "op", "inputs", "backward", "name")

    def __init__(self, graph, value, op, inputs=(), backward=None, name=None):
        self.graph = graph
        self.value = value
        self.op = op
        self.inputs = tuple(inputs)
        self.backward = backward
        self.name = name
        self.index = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}#{self.index}, shape={self.value.shape})"


class DiffGraph:
    """Append-only record of operations; nodes are topologically ordered by construction."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.entries: dict[str, Node] = {}

    def leaf(self, value, name: str | None = None) -> Node:
        node = Node(self, np.asarray(value, dtype=np.float64), "leaf", name=name)
        if name is not None:
            self.entries[name] = node
        return node

    def __len__(self):
        return len(self.nodes)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else x


def _graph_of(*xs) -> DiffGraph | None:
    graph = None
    for x in xs:
        if isinstance(x, Node):
            if graph is None:
                graph = x.graph
            elif x.graph is not graph:
                raise GraphError("operands belong to different graphs")
    return graph


def _record(op: str, out: np.ndarray, inputs: Sequence, backward: Callable) -> Node | np.ndarray:
    graph = _graph_of(*inputs)
    if graph is None:
        return out
    return Node(graph, out, op, inputs, backward)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    av, bv = value(a), value(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {av.shape} and {bv.shape}")
    out = av @ bv

    def backward(g):
        if bv.ndim == 2 and av.ndim > 2:
            # shared right operand: fold batch axes into rows
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        return ga, gb

    return _record("matmul", out, (a, b), backward)


def add(a, b):
    av, bv = value(a), value(b)
    try:
        out = av + bv
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {av.shape} and {bv.shape}") from exc
    return _record("add", out, (a, b),
                   lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    return _record("sub", out, (a, b),
                   lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    try:
        out = av * bv
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {av.shape} and {bv.shape}") from exc
    return _record("mul", out, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, c: float):
    out = value(a) * c
    return _record("scale", out, (a,), lambda g: (g * c,))


def transpose(a, axes=None):
    av = value(a)
    axes = tuple(range(av.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(av, axes), (a,),
                   lambda g: (np.transpose(g, inverse),))


def reshape(a, shape):
    av = value(a)
    return _record("reshape", av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def take(a, index):
    """Basic (slice/integer) indexing along leading axes."""
    av = value(a)
    out = av[index]

    def backward(g):
        ga = np.zeros_like(av)
        ga[index] = g
        return (ga,)

    return _record("take", out, (a,), backward)


def embed(table, ids):
    """Row gather ``table[ids]`` for an integer array of any shape."""
    tv = value(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = tv[ids]

    def backward(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tv.shape[-1]))
        return (gt,)

    return _record("embed", out, (table,), backward)


# ------------------------------------------------------------------- reductions

def sum_all(a):
    av = value(a)
    out = np.array([[av.sum()]])
    return _record("sum_all", out, (a,), lambda g: (np.full_like(av, g.reshape(()).item()),))


def row_sum(a):
    """Sum over the last axis, keeping it as width 1."""
    av = value(a)
    out = av.sum(axis=-1, keepdims=True)
    return _record("row_sum", out, (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),))


# ----------------------------------------------------------------- nonlinearities

def relu(a):
    av = value(a)
    out = np.maximum(av, 0.0)
    return _record("relu", out, (a,), lambda g: (g * (av > 0),))


def tanh(a):
    av = value(a)
    out = np.tanh(av)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a):
    """tanh-approximation GELU."""
    x = value(a)
    x2 = x * x
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record("gelu", out, (a,), backward)


def softmax_rows(m, key_mask=None):
    """Row-wise softmax over the last axis.

    ``key_mask`` (boolean, broadcastable to the logits) marks columns that
    take part; the rest get exactly zero probability.
    """
    x = value(m)
    if key_mask is not None:
        x = np.where(key_mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", out, (m,), backward)


def log_softmax_rows(m):
    x = value(m)
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", out, (m,), backward)


def layer_norm(m, gain, bias, eps: float = 1e-5):
    x, gv, bv = value(m), value(gain), value(bias)
    if eps <= 0:
        raise ValueError("eps must be positive")
    width = x.shape[-1]
    if gv.shape[-1] != width or bv.shape[-1] != width:
        raise DimensionError(f"layer_norm gain/bias {gv.shape}/{bv.shape} do not match width {width}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + bv

    def backward(g):
        gx_hat = g * gv
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gv.shape), _unbroadcast(g, bv.shape)

    return _record("layer_norm", out, (m, gain, bias), backward)


def cross_entropy(logits, targets, weights=None):
    """Weighted mean negative log-likelihood, returned as a 1x1 matrix.

    ``logits`` has classes on the last axis; ``targets`` holds one class id
    per row. ``weights`` (same shape as ``targets``) selects and scales rows;
    the mean is taken over the total weight.
    """
    z = value(logits)
    targets = np.asarray(targets, dtype=np.int64)
    flat = z.reshape(-1, z.shape[-1])
    t = targets.reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise DimensionError(f"targets {targets.shape} do not match logits {z.shape}")
    if np.any(t < 0) or np.any(t >= flat.shape[1]):
        raise ValueError("target id out of range")
    w = np.ones(t.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs a positive total weight")
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(t.shape[0]), t]
    out = np.array([[float((w * nll).sum() / total)]])

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(t.shape[0]), t] -= 1.0
        grad = p * (w / total)[:, None] * g.reshape(()).item()
        return (grad.reshape(z.shape),)

    return _record("cross_entropy", out, (logits,), backward)


# -------------------------------------------------------------------- gradients

def gradients(graph: DiffGraph, scalar: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    """Adjoints of a 1x1 node with respect to each node in ``wrt``."""
    if not isinstance(scalar, Node) or scalar.graph is not graph:
        raise GraphError("source node is not in this graph")
    if scalar.value.size != 1:
        raise GraphError(f"gradient source must be 1x1, got {scalar.value.shape}")
    for node in wrt:
        if not isinstance(node, Node) or node.graph is not graph:
            raise GraphError("target node is not in this graph")
    adj: dict[int, np.ndarray] = {scalar.index: np.ones_like(scalar.value)}
    wanted = {n.index for n in wrt}
    lowest = min(wanted, default=scalar.index)
    for node in reversed(graph.nodes[lowest:scalar.index + 1]):
        if node.index in wanted:
            g = adj.get(node.index)
        else:
            g = adj.pop(node.index, None)
        if g is None or node.backward is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if not isinstance(inp, Node) or inp.index < lowest:
                continue
            prev = adj.get(inp.index)
            adj[inp.index] = gi if prev is None else prev + gi
    return [np.array(adj.get(n.index, np.zeros_like(n.value)), dtype=np.float64)
            .reshape(n.value.shape) for n in wrt]


def gradient(graph: DiffGraph, scalar: Node, wrt: Node) -> np.ndarray:
    return gradients(graph, scalar, [wrt])[0]
