"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation records a node on an implicit tape (the graph hanging off the
output tensor); ``backward`` replays the reachable nodes in reverse creation
order and accumulates adjoints. Subgradients at kinks are fixed to 0 so that
gradient checks are reproducible:

    relu'(0) = 0,  abs'(0) = 0,  clamp_min'(x)=0 at x == bound,
    sqrt'(0) = 0,  max ties route the full adjoint to the lowest index.

Arrays are always float64 and elementwise ops require exact shape equality;
the only broadcasting supported is scalar * tensor (``smul``) and tensor op
python-scalar.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class AutodiffError(RuntimeError):
    """Raised for invalid tape usage (non-scalar loss, empty graph, ...)."""


_SEQ = itertools.count()
_STATE = threading.local()


def _grad_enabled():
    return getattr(_STATE, "grad_enabled", True)


class no_grad:
    """Context manager disabling node recording (inference fast path)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class _Node:
    __slots__ = ("seq", "op", "parents", "backward_fn", "out_shape")

    def __init__(self, op, parents, backward_fn, out_shape):
        self.seq = next(_SEQ)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.out_shape = out_shape


class Tensor:
    """Dense float64 array plus grad bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @classmethod
    def _from_data(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; names below are the canonical API
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return smul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return smul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(out, op, parents, backward_fn):
    req = _grad_enabled() and any(p.requires_grad for p in parents)
    t = Tensor._from_data(out, requires_grad=req)
    if req:
        t.node = _Node(op, tuple(parents), backward_fn, out.shape)
    return t


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("add", a, b)
    out = a.data + b.data
    return _make(out, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("sub", a, b)
    out = a.data - b.data
    return _make(out, "sub", (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("elementwise_mul", a, b)
    out = a.data * b.data
    return _make(out, "elementwise_mul", (a, b), lambda g: (g * b.data, g * a.data))


def smul(a, s):
    a = _as_tensor(a)
    s = float(s)
    out = a.data * s
    return _make(out, "scalar_mul", (a,), lambda g: (g * s,))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data
    return _make(out, "matmul", (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[p.data.shape for p in parts]}") from exc
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concat", tuple(parts), backward)


def tslice(a, key):
    a = _as_tensor(a)
    out = np.ascontiguousarray(a.data[key])
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape, dtype=np.float64)
        full[key] = g
        return (full,)

    return _make(out, "slice", (a,), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    orig = a.data.shape
    return _make(out, "reshape", (a,), lambda g: (g.reshape(orig),))


def tsum(a, axis=None):
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis))
    shape = a.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(np.float64, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(np.float64, copy=True),)

    return _make(out, "sum", (a,), backward)


def tmean(a, axis=None):
    a = _as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis))
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).astype(np.float64, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).astype(np.float64, copy=True),)

    return _make(out, "mean", (a,), backward)


def sin(a):
    a = _as_tensor(a)
    return _make(np.sin(a.data), "sin", (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = _as_tensor(a)
    return _make(np.cos(a.data), "cos", (a,), lambda g: (g * -np.sin(a.data),))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a):
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise AutodiffError("sqrt: negative input")
    out = np.sqrt(a.data)

    def backward(g):
        # sqrt'(0) := 0 keeps hinge/SDF compositions finite (kink convention)
        d = np.where(out > 0.0, 0.5 / np.where(out > 0.0, out, 1.0), 0.0)
        return (g * d,)

    return _make(out, "sqrt", (a,), backward)


def square(a):
    a = _as_tensor(a)
    return _make(a.data * a.data, "square", (a,), lambda g: (g * 2.0 * a.data,))


def relu(a):
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, "relu", (a,), lambda g: (g * (a.data > 0.0),))


def clamp_min(a, bound):
    a = _as_tensor(a)
    bound = float(bound)
    out = np.maximum(a.data, bound)
    return _make(out, "clamp_min", (a,), lambda g: (g * (a.data > bound),))


def tabs(a):
    a = _as_tensor(a)
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def max_over_axis(a, axis):
    a = _as_tensor(a)
    out = a.data.max(axis=axis)
    idx = a.data.argmax(axis=axis)  # first max wins: lowest-index tie-break
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape, dtype=np.float64)
        grid = np.indices(out.shape)
        key = list(grid)
        key.insert(axis if axis >= 0 else a.data.ndim + axis, idx)
        full[tuple(key)] = g
        return (full,)

    return _make(out, "max_over_axis", (a,), backward)


def maximum(a, b):
    """Pairwise max built from listed ops; ties send the adjoint to ``a``."""
    return add(a, relu(sub(b, a)))


_OPS = {
    "add": add,
    "sub": sub,
    "elementwise_mul": mul,
    "scalar_mul": smul,
    "matmul": matmul,
    "concat": concat,
    "slice": tslice,
    "reshape": reshape,
    "sum": tsum,
    "mean": tmean,
    "sin": sin,
    "cos": cos,
    "tanh": tanh,
    "sqrt": sqrt,
    "square": square,
    "relu": relu,
    "clamp_min": clamp_min,
    "abs": tabs,
    "max_over_axis": max_over_axis,
}


def record(op_kind, inputs, params=None):
    """Name-based dispatch into the op table (the functions above are the
    normal entry points)."""
    if op_kind not in _OPS:
        raise AutodiffError(f"unknown op kind: {op_kind}")
    fn = _OPS[op_kind]
    if op_kind == "concat":
        return fn(inputs, **(params or {}))
    return fn(*inputs, **(params or {}))


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Reverse pass over the nodes reachable from one scalar root.

    ``nodes`` is the reachable op list in creation order; ``gradients`` maps
    node seq -> accumulated adjoint once ``run`` has executed.
    """

    def __init__(self, root):
        if not isinstance(root, Tensor):
            raise AutodiffError("backward: root must be a Tensor")
        if root.data.size != 1:
            raise AutodiffError(f"backward: loss must be scalar, got shape {root.data.shape}")
        self.root = root
        self.nodes = []
        self._tensors = {}  # node seq -> output tensor
        self._collect(root)
        self.nodes.sort(key=lambda n: n.seq)
        self.gradients = {}

    def _collect(self, t):
        seen = set()
        stack = [t]
        while stack:
            cur = stack.pop()
            node = cur.node
            if node is None or node.seq in seen:
                continue
            seen.add(node.seq)
            self.nodes.append(node)
            self._tensors[node.seq] = cur
            stack.extend(node.parents)

    def run(self):
        """Propagate adjoints; returns {leaf tensor: gradient array}."""
        adjoint = {}
        leaf_grads = {}
        if self.root.node is not None:
            adjoint[self.root.node.seq] = np.ones_like(self.root.data)
        elif self.root.requires_grad:
            leaf_grads[self.root] = np.ones_like(self.root.data)
        for node in reversed(self.nodes):
            g = adjoint.get(node.seq)
            if g is None:
                continue
            self.gradients[node.seq] = g
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if parent.node is not None:
                    seq = parent.node.seq
                    if seq in adjoint:
                        adjoint[seq] = adjoint[seq] + pg
                    else:
                        adjoint[seq] = pg
                elif parent.requires_grad:
                    if parent in leaf_grads:
                        leaf_grads[parent] = leaf_grads[parent] + pg
                    else:
                        leaf_grads[parent] = pg
        for leaf, g in leaf_grads.items():
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        return leaf_grads


def backward(loss):
    """Run reverse mode from a scalar loss; populates ``grad`` on leaves and
    returns {leaf tensor: gradient array}."""
    if isinstance(loss, Tensor) and loss.node is None and not loss.requires_grad:
        raise AutodiffError("backward: loss is not connected to any gradient leaf")
    return Tape(loss).run()


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def gradient_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a Tensor to a scalar Tensor. Error metric per component:
    |analytic - numeric| / max(1, |analytic|).
    """
    x.grad = None
    y = f(x)
    if y.data.size != 1:
        raise AutodiffError("gradient_check: f must be scalar-valued")
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x.data)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x.data)).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise AutodiffError(f"gradient_check: non-finite f at component {i}")
        numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(x.data.shape)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
