"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Graph` is an append-only tape. Every op whose inputs touch a graph
appends one node holding its input node ids and a closure over whatever
activations its backward pass needs. Ops on tensors with no graph attached
are plain numpy evaluations and record nothing, which is how the inference
paths (decoding, finite differences) stay cheap.

All ops broadcast over leading batch axes where that is natural (matmul,
softmax over the last axis, layer norm), so the same code serves a single
sequence and a padded training batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "GradientMap",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "index",
    "embedding",
    "sum_all",
    "mean",
    "exp",
    "log",
    "gelu",
    "layer_norm",
    "softmax_rows",
    "log_softmax",
    "causal_mask",
    "cosine_similarity",
    "cross_entropy_to_index",
    "hinge",
    "backward",
    "grad_check",
]

LOG_CLAMP = 1e-12


class Tensor:
    """An n-d float64 array, optionally attached to a node of a :class:`Graph`."""

    __slots__ = ("data", "graph", "node")

    def __init__(self, data, graph: "Graph | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.graph is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Graph:
    """Append-only computation tape; insertion order is a topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data) -> Tensor:
        arr = np.array(data, dtype=np.float64)
        self.nodes.append(_Node("leaf", (), arr.shape, None))
        return Tensor(arr, self, len(self.nodes) - 1)

    def _append(self, op, inputs, shape, fn) -> int:
        self.nodes.append(_Node(op, inputs, shape, fn))
        return len(self.nodes) - 1


class GradientMap:
    """Gradients keyed by node id; nodes never reached report zeros."""

    def __init__(self, graph: Graph, grads: dict[int, np.ndarray]):
        self._graph = graph
        self._grads = grads

    def __getitem__(self, key: Tensor | int) -> np.ndarray:
        if isinstance(key, Tensor):
            if key.graph is not self._graph:
                raise ValueError("tensor does not belong to this graph")
            key = key.node
        g = self._grads.get(key)
        if g is None:
            return np.zeros(self._graph.nodes[key].shape)
        return g

    def __contains__(self, key) -> bool:
        if isinstance(key, Tensor):
            key = key.node
        return key in self._grads


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, fn) -> Tensor:
    graph = None
    for t in inputs:
        if t.graph is not None:
            if graph is not None and t.graph is not graph:
                raise ValueError("inputs belong to different graphs")
            graph = t.graph
    if graph is None:
        return Tensor(out)
    ids = tuple(-1 if t.graph is None else t.node for t in inputs)
    node = graph._append(op, ids, out.shape, fn)
    return Tensor(out, graph, node)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = tensor(a)
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = tensor(a)
    x = a.data
    return _record("log", (a,), np.log(x), lambda g: (g / x,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)

    return _record("gelu", (a,), out, fn)


# ------------------------------------------------------------------ structure


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", (a, b), ad @ bd, fn)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), np.transpose(a.data, axes),
                   lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = tensor(a)
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record("concat", parts, out, fn)


def index(a, key) -> Tensor:
    """Basic or fancy indexing; the backward scatters with accumulation."""
    a = tensor(a)
    shape = a.shape
    out = np.array(a.data[key], dtype=np.float64)

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _record("index", (a,), out, fn)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"token id out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _record("embedding", (table,), table.data[ids], fn)


# ------------------------------------------------------------------ reductions


def sum_all(a) -> Tensor:
    a = tensor(a)
    shape = a.shape
    return _record("sum", (a,), np.array(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    """Mean over one axis (dropped) or over everything when ``axis`` is None."""
    a = tensor(a)
    shape = a.shape
    if axis is None:
        n = a.size
        return _record("mean", (a,), np.array(a.data.mean()),
                       lambda g: (np.full(shape, float(g) / n),))
    ax = axis % a.ndim
    n = shape[ax]
    return _record("mean", (a,), a.data.mean(axis=ax),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),))


# -------------------------------------------------------------- fused layers


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain * xhat + shift``."""
    x, gain, shift = tensor(x), tensor(gain), tensor(shift)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data

    def fn(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record("layer_norm", (x, gain, shift), xhat * gd + shift.data, fn)


def causal_mask(t: int) -> np.ndarray:
    """Boolean keep-mask: row i may see columns 0..i."""
    return np.tril(np.ones((t, t), dtype=bool))


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an optional boolean keep-mask.

    Masked entries come out exactly zero. Rows are shifted by their max over
    kept entries before exponentiation.
    """
    x = tensor(x)
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax_rows: a row is fully masked")
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), s, fn)


def log_softmax(x) -> Tensor:
    x = tensor(x)
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def fn(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (x,), out, fn)


def cosine_similarity(u, v) -> Tensor:
    """Cosine of the angle between two 1-d vectors."""
    u, v = tensor(u), tensor(v)
    if u.ndim != 1 or u.shape != v.shape:
        raise ValueError(f"cosine_similarity expects equal-length vectors, got {u.shape} and {v.shape}")
    ud, vd = u.data, v.data
    nu, nv = np.linalg.norm(ud), np.linalg.norm(vd)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine_similarity of a zero-norm vector is undefined")
    s = float(ud @ vd) / (nu * nv)

    def fn(g):
        g = float(g)
        du = g * (vd / (nu * nv) - s * ud / nu**2)
        dv = g * (ud / (nu * nv) - s * vd / nv**2)
        return du, dv

    return _record("cosine", (u, v), np.array(s), fn)


def cross_entropy_to_index(rows, target: int) -> Tensor:
    """Mean over rows of ``-log(rows[:, target])`` for rows that are distributions."""
    rows = tensor(rows)
    if rows.ndim != 2:
        raise ValueError(f"cross_entropy_to_index expects a 2-d array, got {rows.shape}")
    r, n = rows.shape
    if not 0 <= target < n:
        raise ValueError(f"target column {target} out of range for {n} columns")
    if not np.allclose(rows.data.sum(axis=1), 1.0, rtol=0.0, atol=1e-6):
        raise ValueError("cross_entropy_to_index: rows must sum to 1")
    p = rows.data[:, target]
    pc = np.maximum(p, LOG_CLAMP)
    out = np.array(-np.log(pc).mean())

    def fn(g):
        full = np.zeros((r, n))
        full[:, target] = np.where(p >= LOG_CLAMP, -float(g) / (r * pc), 0.0)
        return (full,)

    return _record("cross_entropy", (rows,), out, fn)


def hinge(threshold: float, value) -> Tensor:
    """``max(0, threshold - value)``; the subgradient at the kink is 0."""
    value = tensor(value)
    margin = float(threshold) - value.data
    active = margin > 0
    return _record("hinge", (value,), np.where(active, margin, 0.0),
                   lambda g: (np.where(active, -g, 0.0),))


# -------------------------------------------------------------------- backward


def backward(graph: Graph, loss: Tensor) -> GradientMap:
    """Reverse sweep from ``loss`` over the tape in strict reverse insertion order."""
    if loss.graph is not graph:
        raise ValueError("loss is not a node of this graph")
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    nodes = graph.nodes
    for nid in range(loss.node, -1, -1):
        g = grads.get(nid)
        node = nodes[nid]
        if g is None or node.backward is None:
            continue
        for src, gin in zip(node.inputs, node.backward(g)):
            if src < 0 or gin is None:
                continue
            prev = grads.get(src)
            grads[src] = gin if prev is None else prev + gin
    return GradientMap(graph, grads)


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Largest coordinate-wise relative error between backprop and central differences.

    The error at a coordinate is ``|a - c| / max(1e-8, |a| + |c|)``. ``coords``
    restricts the check to those flat indices (default: every coordinate).
    """
    x = np.array(x, dtype=np.float64)
    g = Graph()
    xt = g.leaf(x)
    analytic = backward(g, f(xt))[xt].reshape(-1)
    flat = x.reshape(-1)
    worst = 0.0
    for i in (range(flat.size) if coords is None else coords):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x.shape))).item()
        fm = f(Tensor(xm.reshape(x.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"grad_check: non-finite function value at coordinate {i}")
        c = (fp - fm) / (2 * h)
        a = analytic[i]
        worst = max(worst, abs(a - c) / max(1e-8, abs(a) + abs(c)))
    return worst
