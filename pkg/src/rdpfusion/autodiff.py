"""Minimal reverse-mode differentiation over float64 numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure pushing its output gradient back to them. ``backward`` walks the
graph in reverse topological order. Inside ``no_grad()`` nothing is recorded,
which is what rollouts use.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import InvalidInputError, NumericalError, UsageError

_GRAD_ENABLED = [True]
DEBUG_FINITE = [False]


@contextlib.contextmanager
def no_grad():
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.value

    def detach(self):
        return Tensor(self.value)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    # arithmetic sugar
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
        return mul(self, 1.0 / _val(o)) if not isinstance(o, Tensor) else div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def backward(self):
        backward(self)


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _needs(*xs):
    return _GRAD_ENABLED[0] and any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _make(value, parents, backward_fn):
    if DEBUG_FINITE[0] and not np.all(np.isfinite(value)):
        raise NumericalError("non-finite value produced in forward pass")
    out = Tensor(value)
    if _needs(*parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _acc(t, g):
    if isinstance(t, Tensor) and t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.value)
        t.grad += _unbroadcast(g, t.value.shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    def bw(g):
        _acc(a, g)
        _acc(b, g)

    return _make(_val(a) + _val(b), (a, b), bw)


def sub(a, b):
    def bw(g):
        _acc(a, g)
        _acc(b, -g)

    return _make(_val(a) - _val(b), (a, b), bw)


def mul(a, b):
    av, bv = _val(a), _val(b)

    def bw(g):
        _acc(a, g * bv)
        _acc(b, g * av)

    return _make(av * bv, (a, b), bw)


def div(a, b):
    av, bv = _val(a), _val(b)

    def bw(g):
        _acc(a, g / bv)
        _acc(b, -g * av / (bv * bv))

    return _make(av / bv, (a, b), bw)


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.shape[-1] != bv.shape[0] or bv.ndim != 2:
        raise InvalidInputError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def bw(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _acc(a, g @ bv.T)
        if isinstance(b, Tensor) and b.requires_grad:
            _acc(b, av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

    return _make(av @ bv, (a, b), bw)


def sigmoid(a):
    av = _val(a)
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    e = np.exp(av[~pos])
    out[~pos] = e / (1.0 + e)

    def bw(g):
        _acc(a, g * out * (1.0 - out))

    return _make(out, (a,), bw)


def tanh(a):
    out = np.tanh(_val(a))

    def bw(g):
        _acc(a, g * (1.0 - out * out))

    return _make(out, (a,), bw)


def exp(a):
    out = np.exp(_val(a))

    def bw(g):
        _acc(a, g * out)

    return _make(out, (a,), bw)


def log(a):
    av = _val(a)

    def bw(g):
        _acc(a, g / av)

    return _make(np.log(av), (a,), bw)


def square(a):
    av = _val(a)

    def bw(g):
        _acc(a, 2.0 * g * av)

    return _make(av * av, (a,), bw)


def tabs(a):
    av = _val(a)

    def bw(g):
        _acc(a, g * np.sign(av))

    return _make(np.abs(av), (a,), bw)


def tsum(a, axis=None, keepdims=False):
    av = _val(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, av.shape))

    return _make(np.sum(av, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None):
    av = _val(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape):
    av = _val(a)

    def bw(g):
        _acc(a, g.reshape(av.shape))

    return _make(av.reshape(shape), (a,), bw)


def concat(xs, axis=-1):
    vals = [_val(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            _acc(x, part)

    return _make(np.concatenate(vals, axis=axis), tuple(xs), bw)


def clip(a, lo, hi):
    """Clamp with zero gradient outside ``[lo, hi]`` (and at the bounds)."""
    av = _val(a)
    inside = (av > lo) & (av < hi)

    def bw(g):
        _acc(a, g * inside)

    return _make(np.clip(av, lo, hi), (a,), bw)


def minimum(a, b):
    """Elementwise min; ties route the gradient to ``b``."""
    av, bv = _val(a), _val(b)
    take_a = av < bv

    def bw(g):
        _acc(a, np.where(take_a, g, 0.0))
        _acc(b, np.where(take_a, 0.0, g))

    return _make(np.where(take_a, av, bv), (a, b), bw)


def maximum(a, b):
    """Elementwise max; ties route the gradient to ``b``."""
    av, bv = _val(a), _val(b)
    take_a = av > bv

    def bw(g):
        _acc(a, np.where(take_a, g, 0.0))
        _acc(b, np.where(take_a, 0.0, g))

    return _make(np.where(take_a, av, bv), (a, b), bw)


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` of every tracked leaf reachable from scalar ``loss``.

    Gradients accumulate into leaves; interior buffers are freed afterwards.
    """
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise UsageError("backward() called on a tensor that is not part of a tracked graph")
    if loss.value.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.value.shape}")
    order = _toposort(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node.grad = None


def numeric_grad(fn, params, h=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. each parameter."""
    out = []
    for p in params:
        g = np.zeros_like(p.value)
        flat, gflat = p.value.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(_val(fn()))
            flat[i] = orig - h
            with no_grad():
                fm = float(_val(fn()))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def gradient_check(fn, params, h=1e-5, rtol=1e-4, atol=1e-8):
    """Compare analytic and finite-difference gradients.

    Returns the worst relative error ``|a - n| / max(|a|, |n|, atol/rtol)``.
    """
    for p in params:
        p.zero_grad()
    loss = fn()
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    numeric = numeric_grad(fn, params, h)
    worst = 0.0
    floor = atol / rtol
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    for p in params:
        p.zero_grad()
    return worst
