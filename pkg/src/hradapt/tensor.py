"""
Small reverse-mode automatic differentiation on numpy arrays, plus Adam.

Each operation returns a new :class:`Tensor` that remembers its parents
and a closure accumulating gradients into them.  :func:`backward` walks
the graph in reverse topological order and then drops the closures, so a
graph is used for exactly one backward pass.

Only the operations needed by the policy network are provided.  All data
is float64.
"""
from __future__ import annotations

import json
import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, True, parents, backward)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from exc


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = None

    def bw():
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad, b.shape))

    out = _make(a.data + b.data, (a, b), bw)
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = None

    def bw():
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-out.grad, b.shape))

    out = _make(a.data - b.data, (a, b), bw)
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = None

    def bw():
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad * a.data, b.shape))

    out = _make(a.data * b.data, (a, b), bw)
    return out


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = None

    def bw():
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-out.grad * a.data / b.data**2, b.shape))

    out = _make(a.data / b.data, (a, b), bw)
    return out


def neg(a):
    out = None

    def bw():
        a._accum(-out.grad)

    out = _make(-a.data, (a,), bw)
    return out


def _unary(a, value, dvalue):
    """Elementwise op with derivative ``dvalue(x, y)``."""
    a = as_tensor(a)
    y = value(a.data)
    out = None

    def bw():
        a._accum(out.grad * dvalue(a.data, y))

    out = _make(y, (a,), bw)
    return out


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(float))


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def sigmoid(a):
    return _unary(a, _sigmoid, lambda x, y: y * (1.0 - y))


def softplus(a):
    """``log(1 + exp(x))`` computed without overflow."""
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x))


def exp(a):
    return _unary(a, np.exp, lambda x, y: y)


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def square(a):
    return _unary(a, np.square, lambda x, y: 2.0 * x)


def clip(a, lo, hi):
    """Clamp values; the gradient is zero where clamping is active."""
    return _unary(a, lambda x: np.clip(x, lo, hi), lambda x, y: ((x >= lo) & (x <= hi)).astype(float))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    take_a = a.data <= b.data
    out = None

    def bw():
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad * take_a, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad * ~take_a, b.shape))

    out = _make(np.where(take_a, a.data, b.data), (a, b), bw)
    return out


def maximum(a, b):
    return neg(minimum(neg(as_tensor(a)), neg(as_tensor(b))))


# ----------------------------------------------------------------------
# linear algebra, reductions, shape


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch in matmul: {a.shape} @ {b.shape}")
    out = None

    def bw():
        if a.requires_grad:
            a._accum(out.grad @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ out.grad)

    out = _make(a.data @ b.data, (a, b), bw)
    return out


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = None

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape).copy())

    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)
    return out


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis, keepdims), 1.0 / n)


def concat(tensors, axis=1):
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = None

    def bw():
        for t, g in zip(ts, np.split(out.grad, splits, axis=axis)):
            if t.requires_grad:
                t._accum(g)

    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError(f"shape mismatch in concat: {[t.shape for t in ts]}") from exc
    out = _make(data, ts, bw)
    return out


def reshape(a, shape):
    out = None

    def bw():
        a._accum(out.grad.reshape(a.shape))

    out = _make(a.data.reshape(shape), (a,), bw)
    return out


def index(a, idx):
    """Basic or integer-array row indexing; gradients scatter-add back."""
    out = None

    def bw():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        a._accum(g)

    out = _make(a.data[idx], (a,), bw)
    return out


def gather(a, rows):
    """Rows ``a[rows]`` of a 2-D tensor (repeats allowed)."""
    rows = np.asarray(rows, dtype=np.int64)
    out = None

    def bw():
        g = np.zeros_like(a.data)
        np.add.at(g, rows, out.grad)
        a._accum(g)

    out = _make(a.data[rows], (a,), bw)
    return out


def segment_sum(values, segment_ids, n_segments):
    """Sum rows of ``values`` that share a segment id."""
    values = as_tensor(values)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if len(ids) != values.shape[0]:
        raise ValueError("segment ids must match the leading dimension")
    data = np.zeros((n_segments,) + values.shape[1:])
    np.add.at(data, ids, values.data)
    out = None

    def bw():
        values._accum(out.grad[ids])

    out = _make(data, (values,), bw)
    return out


def segment_mean(values, segment_ids, n_segments):
    """Mean of rows sharing a segment id; empty segments give zero."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(ids, minlength=n_segments).astype(float)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    values = as_tensor(values)
    shape = (n_segments,) + (1,) * (values.ndim - 1)
    return mul(segment_sum(values, ids, n_segments), inv.reshape(shape))


def segment_softmax(scores, segment_ids, n_segments):
    """Softmax of a 1-D score vector within each segment."""
    scores = as_tensor(scores)
    ids = np.asarray(segment_ids, dtype=np.int64)
    x = scores.data
    mx = np.full(n_segments, -np.inf)
    np.maximum.at(mx, ids, x)
    e = np.exp(x - mx[ids])
    tot = np.zeros(n_segments)
    np.add.at(tot, ids, e)
    y = e / tot[ids]
    out = None

    def bw():
        gy = out.grad * y
        s = np.zeros(n_segments)
        np.add.at(s, ids, gy)
        scores._accum(gy - y * s[ids])

    out = _make(y, (scores,), bw)
    return out


def softmax_rows(a):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = None

    def bw():
        g = out.grad
        a._accum(y * (g - np.sum(g * y, axis=1, keepdims=True)))

    out = _make(y, (a,), bw)
    return out


# ----------------------------------------------------------------------
# distributions


def gaussian_logprob(x, mean_, log_std, mask=None):
    """Diagonal Gaussian log-density summed over columns.

    ``mask`` (same shape, 0/1) selects which coordinates are random;
    masked-out columns contribute nothing.
    """
    x, mean_, log_std = as_tensor(x), as_tensor(mean_), as_tensor(log_std)
    if not np.all(np.isfinite(log_std.data)):
        raise FloatingPointError("non-finite log_std")
    z = div(sub(x, mean_), exp(log_std))
    per = sub(mul(square(z), -0.5), add(log_std, 0.5 * LOG_2PI))
    if mask is not None:
        per = mul(per, np.asarray(mask, float))
    return sum(per, axis=1)


def gaussian_entropy(log_std, mask=None):
    log_std = as_tensor(log_std)
    if not np.all(np.isfinite(log_std.data)):
        raise FloatingPointError("non-finite log_std")
    per = add(log_std, 0.5 * (1.0 + LOG_2PI))
    if mask is not None:
        per = mul(per, np.asarray(mask, float))
    return sum(per, axis=1)


def bernoulli_logprob(a, logit):
    """``log p(a)`` for ``a`` in {0, 1} with ``p(1) = sigmoid(logit)``."""
    a = np.asarray(a, float)
    logit = as_tensor(logit)
    # log sigmoid(l) = -softplus(-l), log(1 - sigmoid(l)) = -softplus(l)
    signed = mul(logit, 1.0 - 2.0 * a)
    return neg(softplus(signed))


def bernoulli_entropy(logit):
    logit = as_tensor(logit)
    p = sigmoid(logit)
    return add(mul(p, softplus(neg(logit))), mul(sub(1.0, p), softplus(logit)))


# ----------------------------------------------------------------------
# graph traversal


def backward(loss):
    """Populate ``.grad`` of every tensor that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()
    # free the tape: interior nodes release parents, closures and grads
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            if node is not loss:
                node.grad = None


# ----------------------------------------------------------------------
# parameters and optimiser


class ParamStore:
    """Named leaf tensors with Adam moment buffers."""

    def __init__(self):
        self.params = {}
        self.m = {}
        self.v = {}
        self.step = 0

    def add(self, name, value):
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def n_parameters(self):
        return int(np.sum([t.data.size for t in self.params.values()]))

    def copy_values(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    # serialisation
    def to_dict(self, header=None):
        def pack(d):
            return {k: {"shape": list(a.shape), "data": a.ravel().tolist()} for k, a in d.items()}

        return {
            "header": header or {},
            "params": pack({k: t.data for k, t in self.params.items()}),
            "optimizer": {"step": self.step, "m": pack(self.m), "v": pack(self.v)},
        }

    @classmethod
    def from_dict(cls, obj):
        def unpack(d):
            return {k: np.array(e["data"], float).reshape(e["shape"]) for k, e in d.items()}

        store = cls()
        for k, a in unpack(obj["params"]).items():
            store.add(k, a)
        opt = obj.get("optimizer", {})
        store.step = int(opt.get("step", 0))
        for k, a in unpack(opt.get("m", {})).items():
            store.m[k] = a
        for k, a in unpack(opt.get("v", {})).items():
            store.v[k] = a
        return store

    def save(self, path, header=None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(header), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            obj = json.load(fh)
        return cls.from_dict(obj), obj.get("header", {})


def global_grad_norm(store, names=None):
    names = store.names() if names is None else names
    tot = 0.0
    for k in names:
        g = store.params[k].grad
        if g is not None:
            tot += float(np.sum(g * g))
    return math.sqrt(tot)


def adam_step(store, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8, grad_clip_norm=0.5, names=None):
    """One Adam update over ``names`` (all parameters by default).

    Gradients are rescaled to global norm ``grad_clip_norm`` before the
    moments are updated.  Parameters without a gradient are left alone.
    Returns the pre-clipping gradient norm.

    Raises
    ------
    FloatingPointError
        If any gradient is NaN or infinite; no parameter is changed.
    """
    names = store.names() if names is None else list(names)
    for k in names:
        g = store.params[k].grad
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {k}; update aborted")
    norm = global_grad_norm(store, names)
    scale = 1.0
    if grad_clip_norm is not None and norm > grad_clip_norm:
        scale = grad_clip_norm / norm
    store.step += 1
    t = store.step
    for k in names:
        p = store.params[k]
        if p.grad is None:
            continue
        g = p.grad * scale
        store.m[k] = beta1 * store.m[k] + (1 - beta1) * g
        store.v[k] = beta2 * store.v[k] + (1 - beta2) * g * g
        mhat = store.m[k] / (1 - beta1**t)
        vhat = store.v[k] / (1 - beta2**t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
    return norm
