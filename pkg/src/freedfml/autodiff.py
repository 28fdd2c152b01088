"""Minimal reverse-mode automatic differentiation over float64 arrays.

A :class:`Graph` records every operation applied to tensors that belong to
it.  :meth:`Graph.backward` walks the tape in reverse and returns a
:class:`Gradients` map.  Multiply-accumulate counts are tallied separately
for the forward and backward passes; only ``matmul`` and elementwise ``mul``
contribute (activations and reductions are free by convention).

Typical use::

    g = Graph()
    w = g.leaf(np.ones((3, 2)))
    x = g.constant(np.ones((4, 3)))
    loss = mean(relu(matmul(x, w)))
    grads = g.backward(loss)
    grads[w]
"""

from __future__ import annotations

import numpy as np

from . import kernels


class AutodiffError(Exception):
    """Base class for errors raised by the engine."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes " + " and ".join(str(s) for s in self.shapes))


class LabelError(AutodiffError, ValueError):
    pass


class Tensor:
    __slots__ = ("data", "graph", "node", "requires_grad")

    def __init__(self, data, graph=None, node=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.node = node
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return list(self.data.shape)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("tag", "inputs", "value", "vjp")

    def __init__(self, tag, inputs, value, vjp):
        self.tag = tag
        self.inputs = inputs
        self.value = value
        self.vjp = vjp


class Gradients:
    """Mapping from tensors (or node ids) to gradient arrays.

    Querying a tensor that the root does not depend on returns zeros and
    records the query in :attr:`detached`.
    """

    def __init__(self, grads, graph):
        self._grads = grads
        self._graph = graph
        self.detached = []

    def __contains__(self, key):
        return self._key(key) in self._grads

    def _key(self, key):
        return key.node if isinstance(key, Tensor) else key

    def __getitem__(self, key):
        k = self._key(key)
        if k in self._grads:
            return self._grads[k]
        self.detached.append(k)
        if isinstance(key, Tensor):
            return np.zeros_like(key.data)
        if k is not None and 0 <= k < len(self._graph.nodes):
            return np.zeros_like(self._graph.nodes[k].value)
        raise KeyError(key)

    @property
    def warning(self):
        return bool(self.detached)

    def items(self):
        return self._grads.items()


class Graph:
    """Append-only tape of operations with MAC counters."""

    def __init__(self):
        self.nodes = []
        self.forward_flops = 0
        self.backward_flops = 0
        self.backward_passes = 0

    def leaf(self, data, requires_grad=True):
        arr = np.array(data, dtype=np.float64)
        node = len(self.nodes)
        self.nodes.append(_Node("leaf", (), arr, None))
        return Tensor(arr, self, node, requires_grad)

    def constant(self, data):
        return self.leaf(data, requires_grad=False)

    def _record(self, tag, inputs, value, vjp):
        node = len(self.nodes)
        self.nodes.append(_Node(tag, tuple(t.node if t.requires_grad else None for t in inputs), value, vjp))
        return Tensor(value, self, node, True)

    def backward(self, root):
        if not isinstance(root, Tensor) or root.graph is not self:
            raise AutodiffError("backward: root was not produced by this graph")
        if root.data.size != 1:
            raise AutodiffError(f"backward: root must be a scalar, got shape {root.shape}")
        grads = {root.node: np.ones_like(root.data)}
        self.backward_passes += 1
        if not root.requires_grad:
            return Gradients({}, self)
        for idx in range(root.node, -1, -1):
            g = grads.get(idx)
            if g is None:
                continue
            node = self.nodes[idx]
            if node.vjp is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if inp is None or gi is None:
                    continue
                if inp in grads:
                    grads[inp] = grads[inp] + gi
                else:
                    grads[inp] = gi
        return Gradients(grads, self)


def _as_tensor(x, graph):
    if isinstance(x, Tensor):
        return x
    if graph is not None:
        return graph.constant(x)
    return Tensor(x)


def _graph_of(*ts):
    for t in ts:
        if isinstance(t, Tensor) and t.graph is not None:
            return t.graph
    return None


def _emit(tag, inputs, value, vjp):
    graph = _graph_of(*inputs)
    if graph is None or not any(t.requires_grad for t in inputs):
        if graph is None:
            return Tensor(value)
        node = len(graph.nodes)
        graph.nodes.append(_Node(tag, (), value, None))
        return Tensor(value, graph, node, False)
    return graph._record(tag, inputs, value, vjp)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(op, a.data.shape, b.data.shape) from None


# ---------------------------------------------------------------- ops


def matmul(a, b):
    graph = _graph_of(a, b)
    a, b = _as_tensor(a, graph), _as_tensor(b, graph)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)
    (m, k), n = a.data.shape, b.data.shape[1]
    macs = m * k * n
    if graph is not None:
        graph.forward_flops += macs
    av, bv = a.data, b.data
    a_req, b_req = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = gb = None
        if a_req:
            ga = g @ bv.T
            graph.backward_flops += macs
        if b_req:
            gb = av.T @ g
            graph.backward_flops += macs
        return ga, gb

    return _emit("matmul", (a, b), av @ bv, vjp)


def add(a, b):
    graph = _graph_of(a, b)
    a, b = _as_tensor(a, graph), _as_tensor(b, graph)
    _broadcast_shape("add", a, b)
    sa, sb = a.data.shape, b.data.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    graph = _graph_of(a, b)
    a, b = _as_tensor(a, graph), _as_tensor(b, graph)
    _broadcast_shape("sub", a, b)
    sa, sb = a.data.shape, b.data.shape
    return _emit("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    graph = _graph_of(a, b)
    a, b = _as_tensor(a, graph), _as_tensor(b, graph)
    out_shape = _broadcast_shape("mul", a, b)
    n = int(np.prod(out_shape))
    if graph is not None:
        graph.forward_flops += n
    av, bv = a.data, b.data
    a_req, b_req = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = gb = None
        if a_req:
            ga = _unbroadcast(g * bv, av.shape)
            graph.backward_flops += n
        if b_req:
            gb = _unbroadcast(g * av, bv.shape)
            graph.backward_flops += n
        return ga, gb

    return _emit("mul", (a, b), av * bv, vjp)


def scale(a, c):
    """Multiply by a python scalar (not counted as a MAC)."""
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a):
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def tanh(a):
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def log(a):
    if np.any(a.data <= 0):
        raise AutodiffError("log: non-positive input")
    x = a.data
    return _emit("log", (a,), np.log(x), lambda g: (g / x,))


def softmax(a):
    if a.data.ndim != 2:
        raise ShapeError("softmax", a.data.shape)
    y = kernels.softmax_rows(a.data)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit("softmax", (a,), y, vjp)


def log_softmax(a):
    if a.data.ndim != 2:
        raise ShapeError("log_softmax", a.data.shape)
    y = kernels.log_softmax_rows(a.data)

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=1, keepdims=True),)

    return _emit("log_softmax", (a,), y, vjp)


def sum(a, axis=None):  # noqa: A001
    shape = a.data.shape
    value = np.asarray(a.data.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", (a,), value, vjp)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    shape = tuple(shape)
    old = a.data.shape
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError("reshape", old, shape)
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    graph = _graph_of(*tensors)
    tensors = [_as_tensor(t, graph) for t in tensors]
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.data.shape for t in tensors)) from None
    bounds = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tuple(tensors), value, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------- losses


def _check_labels(labels, batch, classes, op):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise ShapeError(op, (batch, classes), labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"{op}: labels must lie in [0, {classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(logits, labels):
    """Batch-mean cross-entropy with a fused log-softmax."""
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy", logits.data.shape)
    b, c = logits.data.shape
    labels = _check_labels(labels, b, c, "cross_entropy")
    loss, grad = kernels.cross_entropy_fwd_bwd(np.ascontiguousarray(logits.data), labels)
    return _emit("cross_entropy", (logits,), np.asarray(loss), lambda g: (g * grad,))


def kl_rows(p_logits, q_logits):
    """Per-row KL(softmax(p) || softmax(q)) as plain arrays (no graph)."""
    p = p_logits.data if isinstance(p_logits, Tensor) else np.asarray(p_logits, dtype=np.float64)
    q = q_logits.data if isinstance(q_logits, Tensor) else np.asarray(q_logits, dtype=np.float64)
    return kernels.kl_rows(np.ascontiguousarray(p), np.ascontiguousarray(q))[0]


def kl_divergence(p_logits, q_logits, weights=None):
    """Batch-mean of ``weights[j] * KL(softmax(p_j) || softmax(q_j))``.

    ``weights`` is a constant per-row gate (no gradient flows through it);
    ``None`` means all ones.
    """
    graph = _graph_of(p_logits, q_logits)
    p_logits, q_logits = _as_tensor(p_logits, graph), _as_tensor(q_logits, graph)
    if p_logits.data.shape != q_logits.data.shape or p_logits.data.ndim != 2:
        raise ShapeError("kl_divergence", p_logits.data.shape, q_logits.data.shape)
    b = p_logits.data.shape[0]
    w = np.ones(b) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (b,):
        raise ShapeError("kl_divergence", p_logits.data.shape, w.shape)
    rows, lp, lq = kernels.kl_rows(np.ascontiguousarray(p_logits.data), np.ascontiguousarray(q_logits.data))
    value = np.asarray((w * rows).sum() / b)

    def vjp(g):
        gp, gq = kernels.kl_grads(lp, lq, w)
        return g * gp / b, g * gq / b

    return _emit("kl_divergence", (p_logits, q_logits), value, vjp)
