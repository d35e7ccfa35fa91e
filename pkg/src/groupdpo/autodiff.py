"""Reverse-mode automatic differentiation on a tape, with activation accounting.

Every grad-enabled op appends one node to the active :class:`Tape` together
with the arrays its backward rule needs (its *payload*).  The tape keeps a
running count of retained scalars and its peak, which is the stand-in for
activation memory throughout the package.

Payload policy, per op (only arrays are counted, python scalars are free):

==================  ==============================================
op                  saved for backward
==================  ==============================================
add, sub, neg,      nothing
scale, sum, mean,
broadcast_to,
reshape, concat,
causal_mean
mul                 the other operand, for each operand needing grad
matmul              the other operand, for each operand needing grad
exp, sigmoid, tanh  the output
log, log_sigmoid    the input
log_softmax         the output
logsumexp           the softmax weights (size of the input)
gather              the index array
take_rows, index    the index array
==================  ==============================================
"""

import builtins
import contextlib
import contextvars

import numpy as np

from ._kernels import kernels


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        joined = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class DomainError(AutodiffError, ValueError):
    pass


class UsageError(AutodiffError, ValueError):
    pass


class ActivationBudgetExceeded(AutodiffError, MemoryError):
    """Raised when a tape's live scalar count would exceed its budget."""

    def __init__(self, live, budget):
        self.live = live
        self.budget = budget
        super().__init__(f"live scalars {live} exceed activation budget {budget}")


class _Node:
    __slots__ = ("op", "parents", "payload", "backward", "size")

    def __init__(self, op, parents, payload, backward, size):
        self.op = op
        self.parents = parents
        self.payload = payload
        self.backward = backward
        self.size = size


class Tape:
    """Append-only record of grad-enabled ops.

    ``live_scalars`` is the number of scalars currently held in node payloads;
    ``peak_live_scalars`` is its maximum since the last :meth:`reset_peak`.
    If ``budget`` is set, recording a node that would push the live count over
    it raises :class:`ActivationBudgetExceeded`.
    """

    def __init__(self, budget=None):
        self.nodes = []
        self.live_scalars = 0
        self.peak_live_scalars = 0
        self.budget = budget
        self.generation = 0
        self._nograd_depth = 0

    def __len__(self):
        return len(self.nodes)

    @property
    def grad_enabled(self):
        return self._nograd_depth == 0

    @contextlib.contextmanager
    def no_grad(self):
        self._nograd_depth += 1
        try:
            yield self
        finally:
            self._nograd_depth -= 1

    def reset_peak(self):
        self.peak_live_scalars = self.live_scalars

    def release(self):
        """Drop every node and its payload; the live count returns to 0."""
        for node in self.nodes:
            node.payload = None
        self.nodes = []
        self.live_scalars = 0
        self.generation += 1

    def _record(self, op, parents, payload, backward):
        size = int(builtins.sum(p.size for p in payload if isinstance(p, np.ndarray)))
        if self.budget is not None and self.live_scalars + size > self.budget:
            raise ActivationBudgetExceeded(self.live_scalars + size, self.budget)
        self.nodes.append(_Node(op, parents, payload, backward, size))
        self.live_scalars += size
        if self.live_scalars > self.peak_live_scalars:
            self.peak_live_scalars = self.live_scalars
        return len(self.nodes) - 1


_default_tape = Tape()
_active = contextvars.ContextVar("groupdpo_tape", default=None)


def get_tape():
    tape = _active.get()
    return _default_tape if tape is None else tape


@contextlib.contextmanager
def use_tape(tape):
    token = _active.set(tape)
    try:
        yield tape
    finally:
        _active.reset(token)


def no_grad():
    """Context manager disabling recording on the active tape. Nests freely."""
    return get_tape().no_grad()


def peak_live_scalars(tape=None):
    return (tape or get_tape()).peak_live_scalars


class GradStore(dict):
    """Parameter name -> gradient array."""

    def flat(self, names=None):
        names = sorted(self) if names is None else names
        return np.concatenate([self[n].ravel() for n in names]) if names else np.zeros(0)


class Tensor:
    """A dense array, optionally attached to a tape node or named as a parameter."""

    __slots__ = ("value", "node", "tape", "name", "generation")
    # make numpy operators defer to the reflected methods below
    __array_ufunc__ = None

    def __init__(self, value, node=None, tape=None, name=None):
        self.value = np.asarray(value)
        self.node = node
        self.tape = tape
        self.name = name
        self.generation = tape.generation if tape is not None else None

    @classmethod
    def param(cls, name, value):
        return cls(value, name=name)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def requires_grad(self):
        return self.node is not None or self.name is not None

    def item(self):
        return self.value.item()

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        tag += f", name={self.name!r}" if self.name is not None else ""
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
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op, value, inputs, payload, backward):
    tape = get_tape()
    if tape.grad_enabled and any(t.requires_grad for t in inputs):
        for t in inputs:
            if t.node is not None and t.tape is tape and t.generation != tape.generation:
                raise UsageError(f"{op}: input belongs to a released graph")
        parents = tuple(
            (t.node if t.node is not None and t.tape is tape else None,
             t.name if t.node is None else None,
             t.requires_grad)
            for t in inputs
        )
        nid = tape._record(op, parents, tuple(payload), backward)
        return Tensor(value, node=nid, tape=tape)
    return Tensor(value)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g, payload, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _make("add", a.value + b.value, (a, b), (), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g, payload, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _make("sub", a.value - b.value, (a, b), (), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    sa, sb = a.shape, b.shape
    # payload: b if a needs grad, a if b needs grad
    payload = (b.value if a.requires_grad else None,
               a.value if b.requires_grad else None)

    def backward(g, payload, needs):
        bv, av = payload
        return (_unbroadcast(g * bv, sa) if needs[0] else None,
                _unbroadcast(g * av, sb) if needs[1] else None)

    return _make("mul", a.value * b.value, (a, b), payload, backward)


def scale(a, c):
    """Multiply by a python scalar."""
    a = as_tensor(a)
    c = float(c)

    def backward(g, payload, needs):
        return (g * c,)

    return _make("scale", a.value * c, (a,), (), backward)


def neg(a):
    return scale(a, -1.0)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)

    def backward(g, payload, needs):
        return (g * payload[0],)

    return _make("exp", out, (a,), (out,), backward)


def log(a):
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise DomainError("log: input must be strictly positive")

    def backward(g, payload, needs):
        return (g / payload[0],)

    return _make("log", np.log(a.value), (a,), (a.value,), backward)


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(np.atleast_1d(a.value)).reshape(a.shape)

    def backward(g, payload, needs):
        s = payload[0]
        return (g * s * (1.0 - s),)

    return _make("sigmoid", out, (a,), (out,), backward)


def log_sigmoid(a):
    """log(sigmoid(x)) = -softplus(-x), stable for large |x|."""
    a = as_tensor(a)
    x = a.value
    out = -np.logaddexp(0.0, -x)

    def backward(g, payload, needs):
        xs = np.atleast_1d(payload[0])
        return (g * _sigmoid(-xs).reshape(np.shape(payload[0])),)

    return _make("log_sigmoid", out, (a,), (x,), backward)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)

    def backward(g, payload, needs):
        return (g * (1.0 - payload[0] ** 2),)

    return _make("tanh", out, (a,), (out,), backward)


# ---------------------------------------------------------------- reductions

def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape

    def backward(g, payload, needs):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.sum(a.value, axis=axis), (a,), (), backward)


def mean(a, axis=None):
    a = as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else shape[axis]

    def backward(g, payload, needs):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean", np.mean(a.value, axis=axis), (a,), (), backward)


def log_softmax(a):
    """Log-softmax over the last axis, with max subtraction."""
    a = as_tensor(a)
    x = a.value
    z = x - np.max(x, axis=-1, keepdims=True)
    out = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))

    def backward(g, payload, needs):
        return (g - np.exp(payload[0]) * np.sum(g, axis=-1, keepdims=True),)

    return _make("log_softmax", out, (a,), (out,), backward)


def logsumexp(a):
    """log(sum(exp(x))) over the last axis."""
    a = as_tensor(a)
    x = a.value
    m = np.max(x, axis=-1, keepdims=True)
    w = np.exp(x - m)
    s = np.sum(w, axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    weights = w / s

    def backward(g, payload, needs):
        return (np.expand_dims(g, -1) * payload[0],)

    return _make("logsumexp", out, (a,), (weights,), backward)


# ---------------------------------------------------------------- linear algebra / shape

def matmul(a, b):
    """(..., n, k) @ (k, m) -> (..., n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    payload = (b.value if a.requires_grad else None,
               a.value if b.requires_grad else None)
    k, m = b.shape

    def backward(g, payload, needs):
        bv, av = payload
        ga = g @ bv.T if needs[0] else None
        gb = av.reshape(-1, k).T @ g.reshape(-1, m) if needs[1] else None
        return ga, gb

    return _make("matmul", a.value @ b.value, (a, b), payload, backward)


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    sa = a.shape

    def backward(g, payload, needs):
        return (_unbroadcast(g, sa),)

    return _make("broadcast_to", out, (a,), (), backward)


def reshape(a, shape):
    a = as_tensor(a)
    sa = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", sa, shape) from None

    def backward(g, payload, needs):
        return (g.reshape(sa),)

    return _make("reshape", out, (a,), (), backward)


def concat(tensors):
    """Concatenate 1-D tensors."""
    ts = [as_tensor(t) for t in tensors]
    for t in ts:
        if t.value.ndim != 1:
            raise ShapeError("concat", *[t.shape for t in ts])
    bounds = np.cumsum([0] + [t.size for t in ts])

    def backward(g, payload, needs):
        return tuple(g[bounds[i]:bounds[i + 1]].copy() if needs[i] else None
                     for i in range(len(ts)))

    return _make("concat", np.concatenate([t.value for t in ts]), ts, (), backward)


def gather(a, idx):
    """out[...] = a[..., idx[...]] (selection along the last axis)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError("gather", a.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise DomainError("gather: index out of range")
    out = np.take_along_axis(a.value, idx[..., None], axis=-1)[..., 0]
    sa, dtype = a.shape, a.dtype

    def backward(g, payload, needs):
        ga = np.zeros(sa, dtype=dtype)
        np.put_along_axis(ga, payload[0][..., None], g[..., None], axis=-1)
        return (ga,)

    return _make("gather", out, (a,), (idx,), backward)


def take_rows(a, idx):
    """Row lookup a[idx] for a 2-D table (embedding lookup)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.value.ndim != 2:
        raise ShapeError("take_rows", a.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DomainError("take_rows: index out of range")
    sa, dtype = a.shape, a.dtype

    def backward(g, payload, needs):
        ga = np.zeros(sa, dtype=dtype)
        kernels.scatter_add_rows(ga, payload[0].ravel(), g.reshape(-1, sa[1]))
        return (ga,)

    return _make("take_rows", a.value[idx], (a,), (idx,), backward)


def index(a, idx):
    """Select entries of a 1-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.value.ndim != 1:
        raise ShapeError("index", a.shape, idx.shape)
    sa, dtype = a.shape, a.dtype

    def backward(g, payload, needs):
        ga = np.zeros(sa, dtype=dtype)
        np.add.at(ga, payload[0], g)
        return (ga,)

    return _make("index", a.value[idx], (a,), (idx,), backward)


def causal_mean(a):
    """Running mean over axis 1 of a (B, T, D) tensor."""
    a = as_tensor(a)
    if a.value.ndim != 3:
        raise ShapeError("causal_mean", a.shape)

    def backward(g, payload, needs):
        return (kernels.causal_mean_backward(g),)

    return _make("causal_mean", kernels.causal_mean(a.value), (a,), (), backward)


# ---------------------------------------------------------------- backward

def backward(root, retain_graph=False):
    """Gradients of a scalar ``root`` w.r.t. every named parameter reaching it.

    The tape is released afterwards unless ``retain_graph`` is set.
    """
    root = as_tensor(root)
    if root.size != 1:
        raise UsageError(f"backward: root must be a scalar, got shape {root.shape}")
    grads = GradStore()
    if root.node is None:
        if root.name is not None:
            grads[root.name] = np.ones_like(root.value)
        return grads
    tape = root.tape
    if root.generation != tape.generation:
        raise UsageError("backward: graph already released")
    pending = {root.node: np.ones_like(root.value)}
    for nid in range(root.node, -1, -1):
        g = pending.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.payload is None:
            raise UsageError("backward: graph already released")
        needs = tuple(p[2] for p in node.parents)
        in_grads = node.backward(g, node.payload, needs)
        for (pnode, pname, need), gi in zip(node.parents, in_grads):
            if not need or gi is None:
                continue
            if pnode is not None:
                prev = pending.get(pnode)
                pending[pnode] = gi if prev is None else prev + gi
            elif pname is not None:
                prev = grads.get(pname)
                grads[pname] = gi if prev is None else prev + gi
    if not retain_graph:
        tape.release()
    return grads
