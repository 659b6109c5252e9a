"""A small tape-free reverse-mode differentiation engine over numpy arrays.

Each ``Tensor`` remembers its parents and a closure that pushes its gradient
back to them.  ``backward`` walks the graph in reverse topological order.
Only the handful of ops the policy and value networks need are provided.
"""
from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # make numpy defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order = _toposort(self)
        self.grad = grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _acc(t, g):
    if not t.requires_grad:
        return
    # gradients are never mutated in place, so aliasing g is safe
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(data, parents, backward):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def add(a, b):
    a, b = _wrap(a), _wrap(b, a)

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))
    return _make(a.data + b.data, (a, b), bw)


def neg(a):
    return _make(-a.data, (a,), lambda g: _acc(a, -g))


def mul(a, b):
    a, b = _wrap(a), _wrap(b, a)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))
    return _make(a.data * b.data, (a, b), bw)


def matmul(a, w):
    """``(..., n) @ (n, m)``; the right operand must be 2-D."""
    a, w = _wrap(a), _wrap(w, a)
    out = a.data @ w.data

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ w.data.T)
        if w.requires_grad:
            _acc(w, a.data.reshape(-1, a.data.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
    return _make(out, (a, w), bw)


def tanh(a):
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: _acc(a, g * (1.0 - y * y)))


def sigmoid(a):
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: _acc(a, g * y * (1.0 - y)))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_sigmoid(a):
    x = a.data
    y = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(y, (a,), lambda g: _acc(a, g * (1.0 - _sigmoid(x))))


def concat(items, axis=-1):
    items = [_wrap(t) for t in items]
    out = np.concatenate([t.data for t in items], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.data.shape[ax] for t in items])

    def bw(g):
        for t, lo, hi in zip(items, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _acc(t, g[tuple(sl)])
    return _make(out, tuple(items), bw)


def stack(items, axis=0):
    items = [_wrap(t) for t in items]
    out = np.stack([t.data for t in items], axis=axis)

    def bw(g):
        for i, t in enumerate(items):
            if t.requires_grad:
                _acc(t, np.take(g, i, axis=axis))
    return _make(out, tuple(items), bw)


def _is_fancy(idx):
    if not isinstance(idx, tuple):
        idx = (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in idx)


def index(a, idx):
    """Basic or fancy indexing; repeated fancy indices accumulate gradient."""
    out = a.data[idx]
    fancy = _is_fancy(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        _acc(a, full)
    return _make(out, (a,), bw)


def reshape(a, shape):
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: _acc(a, g.reshape(old)))


def sum(a, axis=None):
    shape = a.data.shape

    def bw(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, shape).copy())
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g, axis), shape).copy())
    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw)


def dot_const(a, w):
    """``sum(a * w)`` for a constant array ``w`` of the same shape."""
    w = np.asarray(w, dtype=a.data.dtype)
    return _make(np.asarray((a.data * w).sum()), (a,), lambda g: _acc(a, g * w))


def bmv(h, q):
    """Batched matrix-vector product ``(B,T,D),(B,D) -> (B,T)``."""
    out = np.einsum("btd,bd->bt", h.data, q.data)

    def bw(g):
        if h.requires_grad:
            _acc(h, g[:, :, None] * q.data[:, None, :])
        if q.requires_grad:
            _acc(q, np.einsum("bt,btd->bd", g, h.data))
    return _make(out, (h, q), bw)


def weighted_sum(alpha, h):
    """``(B,T),(B,T,D) -> (B,D)``."""
    out = np.einsum("bt,btd->bd", alpha.data, h.data)

    def bw(g):
        if alpha.requires_grad:
            _acc(alpha, np.einsum("bd,btd->bt", g, h.data))
        if h.requires_grad:
            _acc(h, alpha.data[:, :, None] * g[:, None, :])
    return _make(out, (alpha, h), bw)


def masked_log_softmax(x, mask):
    """Log-softmax over the last axis restricted to ``mask``; masked entries are -inf."""
    z = np.where(mask, x.data, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(z - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    out = z - m - np.log(s)
    p = e / s

    def bw(g):
        g = np.where(mask, g, 0.0)
        _acc(x, g - p * g.sum(axis=-1, keepdims=True))
    return _make(out, (x,), bw)


def masked_softmax(x, mask):
    z = np.where(mask, x.data, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(z - m), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _acc(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))
    return _make(p, (x,), bw)
