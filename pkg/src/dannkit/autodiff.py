"""Reverse-mode automatic differentiation on dense float64 arrays.

The engine is a thin tape over numpy: every operation eagerly computes its
forward value and registers a backward rule that maps the upstream gradient
to per-parent gradients.  ``backward`` walks the graph once in reverse
topological order and accumulates gradients into the leaves that asked for
them.  Everything is float64 and deterministic: the same seed and the same
call sequence reproduce bit-identical values.

Two module-wide switches exist.  ``no_grad()`` turns graph construction off
(forward values only, no backward rules), which is how evaluation and
critic-side feature extraction stay cheap.  ``set_checked(True)`` makes every
op validate that its output is finite, trading speed for early NaN/Inf
detection.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation."""


_grad_enabled = True
_checked = False


class no_grad:
    """Context manager: build no backward rules inside the block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def is_grad_enabled():
    return _grad_enabled


def set_checked(flag):
    """Toggle finite-value checking at op boundaries. Returns prior state."""
    global _checked
    prev = _checked
    _checked = bool(flag)
    return prev


def _as_value(x):
    arr = np.asarray(x, dtype=np.float64)
    if _checked and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite value entering the graph")
    return arr


class Node:
    """One value in the graph: a float64 array plus its backward rule.

    ``grad`` is populated on leaves by ``backward`` and accumulates across
    calls until ``zero_grad`` resets it.  Values are treated as immutable
    once produced; only the optimizer mutates parameter buffers, between
    graph constructions.
    """

    __slots__ = ("value", "parents", "op", "name", "requires_grad", "grad",
                 "_backward", "_seq")
    _counter = itertools.count()

    def __init__(self, value, parents=(), op="leaf", requires_grad=False, name=None):
        self.value = value
        self.parents = parents
        self.op = op
        self.name = name
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._seq = next(Node._counter)

    @property
    def shape(self):
        return self.value.shape

    # Arithmetic sugar so model code reads like the math it implements.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"


def parameter(value, name=None):
    """A trainable leaf. ``backward`` accumulates its gradient."""
    return Node(_as_value(np.array(value, dtype=np.float64)), op="param",
                requires_grad=_grad_enabled, name=name)


def constant(value, name=None):
    """A non-trainable leaf; gradients never flow into it."""
    return Node(_as_value(value), op="const", requires_grad=False, name=name)


def as_node(x):
    return x if isinstance(x, Node) else constant(x)


def custom(value, parents, op, backward):
    """Assemble an op node. ``backward(g)`` must return one gradient (or
    None) per parent, as fresh arrays. Extension ops build on this."""
    value = _as_value(value)
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    node = Node(value, tuple(parents), op, requires_grad=requires)
    if requires:
        node._backward = backward
    return node


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shapes(a, b, op):
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} do not broadcast")


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_node(a), as_node(b)
    _binary_shapes(a, b, "add")
    return custom(a.value + b.value, (a, b), "add",
                  lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)))


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _binary_shapes(a, b, "sub")
    return custom(a.value - b.value, (a, b), "sub",
                  lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)))


def mul(a, b):
    a, b = as_node(a), as_node(b)
    _binary_shapes(a, b, "mul")
    return custom(a.value * b.value, (a, b), "mul",
                  lambda g: (_unbroadcast(g * b.value, a.value.shape),
                             _unbroadcast(g * a.value, b.value.shape)))


def scale(x, s):
    """Multiply by a python scalar."""
    x = as_node(x)
    s = float(s)
    return custom(x.value * s, (x,), "scale", lambda g: (g * s,))


def matmul(a, b):
    """Matrix product for 1-D/2-D operands, numpy semantics."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError(f"matmul: only 1-D/2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {av.shape} and {bv.shape}")
    out = av @ bv

    def backward(g):
        if av.ndim == 1 and bv.ndim == 1:          # dot -> scalar
            return (g * bv, g * av)
        if av.ndim == 1:                           # (k,) @ (k,n) -> (n,)
            return (bv @ g, np.outer(av, g))
        if bv.ndim == 1:                           # (m,k) @ (k,) -> (m,)
            return (np.outer(g, bv), av.T @ g)
        return (g @ bv.T, av.T @ g)                # (m,k) @ (k,n)

    return custom(out, (a, b), "matmul", backward)


def transpose(x):
    x = as_node(x)
    if x.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {x.value.shape}")
    return custom(x.value.T.copy(), (x,), "transpose", lambda g: (g.T.copy(),))


def relu(x):
    x = as_node(x)
    return custom(np.maximum(x.value, 0.0), (x,), "relu",
                  lambda g: (g * (x.value > 0.0),))


def tanh(x):
    x = as_node(x)
    out = np.tanh(x.value)
    return custom(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    x = as_node(x)
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return custom(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def exp(x):
    x = as_node(x)
    out = np.exp(x.value)
    return custom(out, (x,), "exp", lambda g: (g * out,))


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``."""
    x = as_node(x)
    v = x.value
    if v.ndim == 0 or v.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} for shape {v.shape}")
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return custom(out, (x,), "softmax", backward)


def mean(x, axis=None):
    x = as_node(x)
    v = x.value
    if v.size == 0 or (axis is not None and v.shape[axis] == 0):
        raise ShapeError(f"mean: empty reduction for shape {v.shape}")
    out = v.mean(axis=axis)
    if axis is None:
        count = v.size

        def backward(g):
            return (np.full_like(v, float(g) / count),)
    else:
        count = v.shape[axis]

        def backward(g):
            return (np.repeat(np.expand_dims(g / count, axis), count, axis=axis),)

    return custom(out, (x,), "mean", backward)


def sum_over(x, axis=None):
    x = as_node(x)
    v = x.value
    out = v.sum(axis=axis)
    if axis is None:
        def backward(g):
            return (np.full_like(v, float(g)),)
    else:
        def backward(g):
            return (np.repeat(np.expand_dims(g, axis), v.shape[axis], axis=axis),)

    return custom(out, (x,), "sum", backward)


def max_over_time(x):
    """Column-wise max over the leading (time) axis of a (T, C) matrix."""
    x = as_node(x)
    v = x.value
    if v.ndim != 2 or v.shape[0] == 0:
        raise ShapeError(f"max_over_time: need non-empty (T, C) input, got {v.shape}")
    winners = v.argmax(axis=0)          # first max wins: deterministic
    out = v[winners, np.arange(v.shape[1])]

    def backward(g):
        gx = np.zeros_like(v)
        gx[winners, np.arange(v.shape[1])] = g
        return (gx,)

    return custom(out, (x,), "max_over_time", backward)


def concat(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat: no inputs")
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(p.copy() for p in np.split(g, offsets, axis=axis))

    return custom(out, tuple(nodes), "concat", backward)


def stack(nodes):
    """Stack equal-shape 1-D nodes into a matrix, one per row."""
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("stack: no inputs")
    out = np.stack([n.value for n in nodes])

    def backward(g):
        return tuple(g[i].copy() for i in range(len(nodes)))

    return custom(out, tuple(nodes), "stack", backward)


def dropout(x, rate, rng, training=True):
    """Inverted-scaling dropout; identity when ``training`` is false."""
    x = as_node(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.value.shape) >= rate) / (1.0 - rate)
    return custom(x.value * keep, (x,), "dropout", lambda g: (g * keep,))


def gather_rows(x, indices):
    """Select rows of a 2-D node; backward scatter-adds into the source."""
    x = as_node(x)
    if x.value.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-D table, got {x.value.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = x.value[idx]

    def backward(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        return (gx,)

    return custom(out, (x,), "gather_rows", backward)


def row(x, i):
    """Row ``i`` of a 2-D node as a 1-D node."""
    x = as_node(x)
    if x.value.ndim != 2:
        raise ShapeError(f"row: expected 2-D input, got {x.value.shape}")
    i = int(i)

    def backward(g):
        gx = np.zeros_like(x.value)
        gx[i] = g
        return (gx,)

    return custom(x.value[i].copy(), (x,), "row", backward)


def slice_rows(x, start, stop):
    x = as_node(x)
    if x.value.ndim != 2:
        raise ShapeError(f"slice_rows: expected 2-D input, got {x.value.shape}")
    if not 0 <= start < stop <= x.value.shape[0]:
        raise ShapeError(f"slice_rows: bad range [{start}, {stop}) for {x.value.shape}")

    def backward(g):
        gx = np.zeros_like(x.value)
        gx[start:stop] = g
        return (gx,)

    return custom(x.value[start:stop].copy(), (x,), "slice_rows", backward)


def grl(x, lam):
    """Gradient-reversal layer: identity forward, -lam * g backward.

    The forward value is the input buffer itself (bit-identical); the
    backward rule multiplies the upstream gradient by exactly ``-lam``.
    """
    x = as_node(x)
    lam = float(lam)
    if lam < 0.0:
        raise ValueError(f"grl: lambda must be >= 0, got {lam}")
    return custom(x.value, (x,), "grl", lambda g: (-lam * g,))


def _log_softmax(v, axis=-1):
    m = v.max(axis=axis, keepdims=True)
    shifted = v - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits, label):
    """Softmax cross-entropy of one logit vector against an integer label."""
    logits = as_node(logits)
    v = logits.value
    if v.ndim != 1 or v.shape[0] == 0:
        raise ShapeError(f"cross_entropy: expected non-empty 1-D logits, got {v.shape}")
    label = int(label)
    if not 0 <= label < v.shape[0]:
        raise ValueError(f"cross_entropy: label {label} out of range for {v.shape[0]} classes")
    logp = _log_softmax(v)
    out = np.array(-logp[label])

    def backward(g):
        p = np.exp(logp)
        p[label] -= 1.0
        return (float(g) * p,)

    return custom(out, (logits,), "cross_entropy", backward)


def batch_cross_entropy(logits, labels):
    """Mean softmax cross-entropy over a (B, C) batch of logit rows."""
    logits = as_node(logits)
    v = logits.value
    labels = np.asarray(labels, dtype=np.intp)
    if v.ndim != 2 or v.shape[0] == 0:
        raise ShapeError(f"batch_cross_entropy: expected non-empty (B, C) logits, got {v.shape}")
    if labels.shape != (v.shape[0],):
        raise ShapeError(f"batch_cross_entropy: {labels.shape} labels for {v.shape} logits")
    if labels.min() < 0 or labels.max() >= v.shape[1]:
        raise ValueError("batch_cross_entropy: label out of range")
    logp = _log_softmax(v, axis=1)
    rows = np.arange(v.shape[0])
    out = np.array(-logp[rows, labels].mean())

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (float(g) / v.shape[0] * p,)

    return custom(out, (logits,), "batch_cross_entropy", backward)


def wasserstein_loss(scores_src, scores_tgt):
    """Kantorovich-Rubinstein estimate: mean source score - mean target score."""
    scores_src, scores_tgt = as_node(scores_src), as_node(scores_tgt)
    if scores_src.value.size == 0 or scores_tgt.value.size == 0:
        raise ShapeError("wasserstein_loss: empty score batch")
    return sub(mean(scores_src), mean(scores_tgt))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _toposort(root):
    """Reachable gradient-carrying nodes, oldest first.

    Creation order is a topological order (parents exist before children),
    and unlike a traversal-dependent DFS order it makes the gradient
    accumulation sequence at shared nodes a function of how the graph was
    built, not of its shape: adding a side branch (say, a zero-scaled
    critic path) cannot reorder the floating-point sums on the main path.
    """
    reachable, visited, stack = [], set(), [root]
    while stack:
        node = stack.pop()
        if id(node) in visited:
            continue
        visited.add(id(node))
        reachable.append(node)
        for p in node.parents:
            if p.requires_grad:
                stack.append(p)
    reachable.sort(key=lambda n: n._seq)
    return reachable


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires
    gradients.  Returns a map of parameter nodes to their (accumulated)
    gradients.  Repeated calls keep accumulating; reset with ``zero_grad``.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar-shaped, got {loss.value.shape}")
    if not loss.requires_grad:
        return {}
    topo = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    params = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # Leaf: fold this call's contribution into the persistent slot.
            node.grad = g if node.grad is None else node.grad + g
            if node.op == "param":
                params[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            held = grads.get(key)
            grads[key] = pg if held is None else held + pg
    return params


def zero_grad(params):
    for p in params:
        p.grad = None


def dump_graph(root):
    """Text adjacency list of the graph below ``root`` (debug aid)."""
    order, visited, stack = [], set(), [root]
    while stack:
        node = stack.pop()
        if id(node) in visited:
            continue
        visited.add(id(node))
        order.append(node)
        stack.extend(node.parents)
    ids = {id(n): i for i, n in enumerate(order)}
    lines = []
    for n in order:
        label = n.name or n.op
        parents = ", ".join(f"#{ids[id(p)]}" for p in n.parents)
        lines.append(f"#{ids[id(n)]} {label} {n.value.shape}" + (f" <- {parents}" if parents else ""))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter Adam accumulators."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, value):
        return cls(m=np.zeros_like(value), v=np.zeros_like(value))


def adam_step(param, grad, state, lr):
    """One Adam update, in place on ``param``. Returns ``param``."""
    if lr <= 0.0:
        raise ValueError(f"adam_step: lr must be > 0, got {lr}")
    if param.shape != grad.shape:
        raise ShapeError(f"adam_step: param {param.shape} vs grad {grad.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


class Adam:
    """Adam over a fixed set of parameter nodes (lr 0.01 by default)."""

    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.states = {id(p): AdamState(m=np.zeros_like(p.value), v=np.zeros_like(p.value),
                                        beta1=beta1, beta2=beta2, eps=eps)
                       for p in self.params}

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            adam_step(p.value, p.grad, self.states[id(p)], self.lr)

    def zero_grad(self):
        zero_grad(self.params)


def clip_params(params, c):
    """Clip every element of every param to [-c, c], in place."""
    if c <= 0.0:
        raise ValueError(f"clip_params: c must be > 0, got {c}")
    for p in params:
        buf = p.value if isinstance(p, Node) else p
        np.clip(buf, -c, c, out=buf)


def glorot_uniform(rng, fan_in, fan_out, shape=None):
    """Uniform(-sqrt(6/(fan_in+fan_out)), +...) initializer."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)
