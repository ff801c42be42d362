"""Minimal reverse-mode autodiff on dense float64 arrays.

Define-by-run: values are computed eagerly while the graph is built, one
graph per decoder step / sequence.  Only the handful of ops the decoder
needs are provided; no broadcasting beyond matrix + row-vector.
"""
from __future__ import annotations

import numpy as np

LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when an op is handed incompatible shapes; message names the op."""


class Node:
    """One value in the computation graph.

    ``parents`` holds ``(parent_node, vjp)`` pairs where ``vjp`` maps the
    adjoint of this node to the adjoint contribution of that parent.
    """

    __slots__ = ("value", "op", "parents", "adjoint", "param")

    def __init__(self, value, op="const", parents=()):
        self.value = value
        self.op = op
        self.parents = parents
        self.adjoint = None
        self.param = None

    @property
    def shape(self):
        return self.value.shape


class Param:
    """A named trainable array; every graph use creates a fresh leaf node."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def node(self):
        n = Node(self.value, op="param")
        n.param = self
        return n

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def const(x):
    return Node(np.asarray(x, dtype=np.float64), op="const")


def add(a, b):
    if not isinstance(b, Node):
        return Node(a.value + float(b), "add", ((a, lambda g: g),))
    if a.value.shape == b.value.shape:
        return Node(a.value + b.value, "add",
                    ((a, lambda g: g), (b, lambda g: g)))
    # matrix + row vector, broadcast down the rows
    if (a.value.ndim == 2 and b.value.ndim == 1
            and a.value.shape[1] == b.value.shape[0]):
        return Node(a.value + b.value, "add",
                    ((a, lambda g: g), (b, lambda g: g.sum(axis=0))))
    raise ShapeError(f"add: incompatible shapes {a.value.shape} and {b.value.shape}")


def mul(a, b):
    if not isinstance(b, Node):
        s = float(b)
        return Node(a.value * s, "mul", ((a, lambda g: g * s),))
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: incompatible shapes {a.value.shape} and {b.value.shape}")
    return Node(a.value * b.value, "mul",
                ((a, lambda g: g * b.value), (b, lambda g: g * a.value)))


def matmul(a, b):
    av, bv = a.value, b.value
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} x {bv.shape}")
        return Node(av @ bv, "matmul",
                    ((a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)))
    if av.ndim == 2 and bv.ndim == 1:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} x {bv.shape}")
        return Node(av @ bv, "matmul",
                    ((a, lambda g: np.outer(g, bv)), (b, lambda g: av.T @ g)))
    if av.ndim == 1 and bv.ndim == 2:
        if av.shape[0] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} x {bv.shape}")
        return Node(av @ bv, "matmul",
                    ((a, lambda g: bv @ g), (b, lambda g: np.outer(av, g))))
    if av.ndim == 1 and bv.ndim == 1:
        if av.shape[0] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} x {bv.shape}")
        return Node(np.asarray(av @ bv), "matmul",
                    ((a, lambda g: g * bv), (b, lambda g: g * av)))
    raise ShapeError(f"matmul: unsupported ranks {av.ndim} and {bv.ndim}")


def tanh(x):
    y = np.tanh(x.value)
    return Node(y, "tanh", ((x, lambda g: g * (1.0 - y * y)),))


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.value))
    return Node(y, "sigmoid", ((x, lambda g: g * y * (1.0 - y)),))


def relu(x):
    y = np.maximum(x.value, 0.0)
    return Node(y, "relu", ((x, lambda g: g * (x.value > 0.0)),))


def softmax(x):
    """Stable softmax of a 1-D vector."""
    if x.value.ndim != 1:
        raise ShapeError(f"softmax: expected vector, got {x.value.shape}")
    z = x.value - x.value.max()
    e = np.exp(z)
    y = e / e.sum()
    return Node(y, "softmax",
                ((x, lambda g: y * (g - np.dot(g, y))),))


def softmax_rows(x):
    """Row-wise stable softmax of a 2-D matrix."""
    if x.value.ndim != 2:
        raise ShapeError(f"softmax_rows: expected matrix, got {x.value.shape}")
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return Node(y, "softmax",
                ((x, lambda g: y * (g - (g * y).sum(axis=1, keepdims=True))),))


def concat(nodes):
    """Concatenate 1-D vectors."""
    nodes = list(nodes)
    parents = []
    lo = 0
    for n in nodes:
        if n.value.ndim != 1:
            raise ShapeError(f"concat: expected vectors, got {n.value.shape}")
        hi = lo + n.value.shape[0]
        parents.append((n, lambda g, lo=lo, hi=hi: g[lo:hi]))
        lo = hi
    return Node(np.concatenate([n.value for n in nodes]), "concat", tuple(parents))


def stack_rows(nodes):
    """Stack 1-D vectors of equal length into a matrix, one per row."""
    nodes = list(nodes)
    parents = [(n, lambda g, i=i: g[i]) for i, n in enumerate(nodes)]
    return Node(np.stack([n.value for n in nodes]), "concat", tuple(parents))


def augment_rows(x, v):
    """Append vector ``v`` to every row of matrix ``x``."""
    n = x.value.shape[0]
    a = x.value.shape[1]
    tiled = np.broadcast_to(v.value, (n, v.value.shape[0]))
    return Node(np.hstack([x.value, tiled]), "concat",
                ((x, lambda g: g[:, :a]), (v, lambda g: g[:, a:].sum(axis=0))))


def lookup(table, index):
    """Row lookup in a 2-D table; ``index`` is an int or a list of ints."""
    if isinstance(index, (int, np.integer)):
        i = int(index)

        def vjp(g, i=i):
            out = np.zeros_like(table.value)
            out[i] = g
            return out

        return Node(table.value[i], "lookup", ((table, vjp),))
    idx = [int(i) for i in index]

    def vjp(g, idx=idx):
        out = np.zeros_like(table.value)
        np.add.at(out, idx, g)
        return out

    return Node(table.value[idx], "lookup", ((table, vjp),))


def element(x, i):
    """Scalar element of a 1-D vector."""
    i = int(i)

    def vjp(g, i=i):
        out = np.zeros_like(x.value)
        out[i] = g
        return out

    return Node(np.asarray(x.value[i]), "slice", ((x, vjp),))


def element2(x, i, j):
    """Scalar element of a 2-D matrix."""
    i, j = int(i), int(j)

    def vjp(g, i=i, j=j):
        out = np.zeros_like(x.value)
        out[i, j] = g
        return out

    return Node(np.asarray(x.value[i, j]), "slice", ((x, vjp),))


def gather(x, indices):
    """Select elements of a 1-D vector (duplicates accumulate in the vjp)."""
    idx = [int(i) for i in indices]

    def vjp(g, idx=idx):
        out = np.zeros_like(x.value)
        np.add.at(out, idx, g)
        return out

    return Node(x.value[idx], "slice", ((x, vjp),))


def subvec(x, lo, hi):
    """Contiguous slice of a 1-D vector."""
    lo, hi = int(lo), int(hi)

    def vjp(g, lo=lo, hi=hi):
        out = np.zeros_like(x.value)
        out[lo:hi] = g
        return out

    return Node(x.value[lo:hi], "slice", ((x, vjp),))


def slice_row(x, i):
    """Row ``i`` of a 2-D matrix as a 1-D vector."""
    i = int(i)

    def vjp(g, i=i):
        out = np.zeros_like(x.value)
        out[i] = g
        return out

    return Node(x.value[i], "slice", ((x, vjp),))


def as_vector(x):
    """Reshape a scalar node to a length-1 vector."""
    return Node(x.value.reshape(1), "slice",
                ((x, lambda g: g.reshape(x.value.shape)),))


def safe_log(x):
    """log with the argument clamped at LOG_EPS (guards -log 0)."""
    clamped = np.maximum(x.value, LOG_EPS)

    def vjp(g):
        return np.where(x.value > LOG_EPS, g / clamped, 0.0)

    return Node(np.log(clamped), "log", ((x, vjp),))


def vsum(x):
    """Sum of a 1-D vector as a scalar node."""
    return Node(np.asarray(x.value.sum()), "sum",
                ((x, lambda g: g * np.ones_like(x.value)),))


def affine(pairs, bias=None):
    """Fused sum of matrix-vector products plus bias: sum_k W_k @ x_k + b.

    One node instead of a matmul/add chain; the workhorse behind LSTM gate
    pre-activations.
    """
    total = None
    parents = []
    for w, x in pairs:
        wv, xv = w.value, x.value
        if wv.ndim != 2 or xv.ndim != 1 or wv.shape[1] != xv.shape[0]:
            raise ShapeError(f"affine: {wv.shape} x {xv.shape}")
        term = wv @ xv
        total = term if total is None else total + term
        parents.append((w, lambda g, xv=xv: np.outer(g, xv)))
        parents.append((x, lambda g, wv=wv: wv.T @ g))
    if bias is not None:
        total = total + bias.value
        parents.append((bias, lambda g: g))
    return Node(total, "affine", tuple(parents))


def scored_tanh(feats, w, query, score):
    """Fused additive-attention scores: tanh(feats @ w + query) @ score.

    ``feats`` may be a matrix (one score per row) or a single vector
    (scalar score); ``query`` broadcasts over rows in the matrix case.
    """
    fv, wv, qv, sv = feats.value, w.value, query.value, score.value
    if fv.ndim == 2:
        t = np.tanh(fv @ wv + qv)
        dt_common = 1.0 - t * t

        def vjp_f(g):
            da = np.outer(g, sv) * dt_common
            return da @ wv.T

        def vjp_w(g):
            da = np.outer(g, sv) * dt_common
            return fv.T @ da

        def vjp_q(g):
            return (np.outer(g, sv) * dt_common).sum(axis=0)

        def vjp_s(g):
            return t.T @ g

        return Node(t @ sv, "scores",
                    ((feats, vjp_f), (w, vjp_w), (query, vjp_q), (score, vjp_s)))
    t = np.tanh(fv @ wv + qv)
    dt = 1.0 - t * t

    def vjp_fv(g):
        return wv @ (g * sv * dt)

    def vjp_wv(g):
        return np.outer(fv, g * sv * dt)

    def vjp_qv(g):
        return g * sv * dt

    def vjp_sv(g):
        return g * t

    return Node(np.asarray(t @ sv), "scores",
                ((feats, vjp_fv), (w, vjp_wv), (query, vjp_qv), (score, vjp_sv)))


def lstm_state(gates, c_prev):
    """Fused LSTM state update from pre-activation gates [i; f; o; u].

    Returns the concatenated [h; c; tanh(c)] vector (the last block feeds
    the sentinel gate); slice with :func:`subvec`.
    """
    d = c_prev.value.shape[0]
    if gates.value.shape[0] != 4 * d:
        raise ShapeError(f"lstm_state: gates {gates.value.shape} vs state dim {d}")
    gv = gates.value
    i = 1.0 / (1.0 + np.exp(-gv[:d]))
    f = 1.0 / (1.0 + np.exp(-gv[d:2 * d]))
    o = 1.0 / (1.0 + np.exp(-gv[2 * d:3 * d]))
    u = np.tanh(gv[3 * d:])
    c = f * c_prev.value + i * u
    tc = np.tanh(c)
    h = o * tc

    def vjp_gates(g):
        ah, ac, atc = g[:d], g[d:2 * d], g[2 * d:]
        dc = ac + (ah * o + atc) * (1.0 - tc * tc)
        out = np.empty(4 * d)
        out[:d] = dc * u * i * (1.0 - i)
        out[d:2 * d] = dc * c_prev.value * f * (1.0 - f)
        out[2 * d:3 * d] = ah * tc * o * (1.0 - o)
        out[3 * d:] = dc * i * (1.0 - u * u)
        return out

    def vjp_c_prev(g):
        ah, ac, atc = g[:d], g[d:2 * d], g[2 * d:]
        dc = ac + (ah * o + atc) * (1.0 - tc * tc)
        return dc * f

    return Node(np.concatenate([h, c, tc]), "lstm",
                ((gates, vjp_gates), (c_prev, vjp_c_prev)))


def forward(root):
    """Value of the (eagerly evaluated) graph rooted at ``root``."""
    return root.value


def _topo(root):
    """Post-order over the DAG: parents appear before children."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root):
    """Accumulate adjoints into the ``grad`` of every Param reachable from root.

    The root must be a scalar.  Grads add onto whatever is already in
    ``param.grad``; call :func:`zero_grads` first for a fresh gradient.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")
    order = _topo(root)
    root.adjoint = np.ones_like(root.value)
    for node in reversed(order):
        g = node.adjoint
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent.adjoint is None:
                parent.adjoint = np.array(contrib, dtype=np.float64)
            else:
                parent.adjoint += contrib
        if node.param is not None:
            node.param.grad += node.adjoint


def zero_grads(params):
    for p in params:
        p.grad.fill(0.0)


def grad_check(loss_fn, params, eps=1e-5):
    """Max relative error between backward() and central finite differences.

    ``loss_fn`` must rebuild the graph from the current param values and
    return a scalar node.  Relative error per element is
    ``|g - fd| / max(1e-8, |g| + |fd|)``.
    """
    params = list(params)
    zero_grads(params)
    backward(loss_fn())
    analytic = {p.name: p.grad.copy() for p in params}
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        gflat = analytic[p.name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(loss_fn().value)
            flat[j] = orig - eps
            lo = float(loss_fn().value)
            flat[j] = orig
            fd = (hi - lo) / (2.0 * eps)
            err = abs(gflat[j] - fd) / max(1e-8, abs(gflat[j]) + abs(fd))
            if err > worst:
                worst = err
    return worst
