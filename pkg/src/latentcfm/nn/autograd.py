"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 array and remembers the operation that
produced it.  Calling :func:`backward` on a scalar walks the recorded graph in
reverse topological order and accumulates ``grad`` on every tensor that
requires it.  The graph is rebuilt on every forward pass, so there is nothing
to reset between optimisation steps beyond zeroing gradients.
"""
from __future__ import annotations

import math

import numpy as np

SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        """Flat view of the payload."""
        return self.data.reshape(-1)

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def is_finite(self):
        return bool(np.all(np.isfinite(self.data)))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracks(*ts):
    return any(t.requires_grad for t in ts)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True) if g.shape == t.data.shape else _unbroadcast(g, t.data.shape).copy()
    else:
        t.grad += _unbroadcast(g, t.data.shape)


def _make(data, parents, backward):
    if _tracks(*parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


# -- elementwise ------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = None

    def bw():
        _accum(a, out.grad)
        _accum(b, out.grad)

    out = _make(a.data + b.data, (a, b), bw)
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = None

    def bw():
        _accum(a, out.grad)
        _accum(b, -out.grad)

    out = _make(a.data - b.data, (a, b), bw)
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = None

    def bw():
        if a.requires_grad:
            _accum(a, out.grad * b.data)
        if b.requires_grad:
            _accum(b, out.grad * a.data)

    out = _make(a.data * b.data, (a, b), bw)
    return out


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = None

    def bw():
        if a.requires_grad:
            _accum(a, out.grad / b.data)
        if b.requires_grad:
            _accum(b, -out.grad * a.data / (b.data * b.data))

    out = _make(a.data / b.data, (a, b), bw)
    return out


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    a = as_tensor(a)
    p = float(exponent)
    out = None

    def bw():
        if p == 2.0:
            _accum(a, out.grad * 2.0 * a.data)
        else:
            _accum(a, out.grad * p * a.data ** (p - 1.0))

    out = _make(a.data * a.data if p == 2.0 else a.data ** p, (a,), bw)
    return out


def square(a):
    return power(a, 2)


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    out = None

    def bw():
        _accum(a, out.grad * y)

    out = _make(y, (a,), bw)
    return out


def log(a):
    a = as_tensor(a)
    out = None

    def bw():
        _accum(a, out.grad / a.data)

    out = _make(np.log(a.data), (a,), bw)
    return out


def sqrt(a):
    a = as_tensor(a)
    y = np.sqrt(a.data)
    out = None

    def bw():
        _accum(a, out.grad * 0.5 / y)

    out = _make(y, (a,), bw)
    return out


def clip(a, lo, hi):
    """Clamp values; gradient is passed only where the input was inside."""
    a = as_tensor(a)
    out = None

    def bw():
        mask = (a.data >= lo) & (a.data <= hi)
        _accum(a, out.grad * mask)

    out = _make(np.clip(a.data, lo, hi), (a,), bw)
    return out


# -- activations ------------------------------------------------------------
def selu_array(x):
    return SELU_SCALE * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def relu_array(x):
    return np.maximum(x, 0.0)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_array(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def selu(a):
    a = as_tensor(a)
    x = a.data
    neg = SELU_SCALE * SELU_ALPHA * np.exp(np.minimum(x, 0.0))
    y = np.where(x > 0, SELU_SCALE * x, neg - SELU_SCALE * SELU_ALPHA)
    out = None

    def bw():
        _accum(a, out.grad * np.where(x > 0, SELU_SCALE, neg))

    out = _make(y, (a,), bw)
    return out


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    out = None

    def bw():
        _accum(a, out.grad * mask)

    out = _make(a.data * mask, (a,), bw)
    return out


def gelu(a):
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = None

    def bw():
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * dinner
        _accum(a, out.grad * d)

    out = _make(0.5 * x * (1.0 + th), (a,), bw)
    return out


ACTIVATIONS = {"selu": selu, "relu": relu, "gelu": gelu}
ACTIVATION_ARRAYS = {"selu": selu_array, "relu": relu_array, "gelu": gelu_array}


# -- linear algebra / reductions -------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = None

    def bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g if a.data.ndim > 1 else np.outer(a.data, g))

    out = _make(a.data @ b.data, (a, b), bw)
    return out


def linear(x, weight, bias=None):
    """``x @ weight + bias`` fused into a single graph node."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.shape[-1] != weight.data.shape[0]:
        raise ShapeError(f"expected last dimension {weight.data.shape[0]}, got {x.data.shape[-1]}")
    y = x.data @ weight.data
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = None

    def bw():
        g = out.grad
        if x.requires_grad:
            _accum(x, g @ weight.data.T)
        if weight.requires_grad:
            _accum(weight, x.data.T @ g)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=0))

    out = _make(y, parents, bw)
    return out


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = None

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    out = _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)
    return out


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    y = (np.log(s) + m)
    soft = e / s
    if not keepdims:
        y = np.squeeze(y, axis=axis)
    out = None

    def bw():
        g = out.grad if keepdims else np.expand_dims(out.grad, axis)
        _accum(a, g * soft)

    out = _make(y, (a,), bw)
    return out


def log_softmax(a, axis=-1):
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def reshape(a, shape):
    a = as_tensor(a)
    out = None

    def bw():
        _accum(a, out.grad.reshape(a.data.shape))

    out = _make(a.data.reshape(shape), (a,), bw)
    return out


def transpose(a):
    a = as_tensor(a)
    out = None

    def bw():
        _accum(a, out.grad.T)

    out = _make(a.data.T, (a,), bw)
    return out


def getitem(a, idx):
    a = as_tensor(a)
    out = None

    def bw():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        _accum(a, g)

    out = _make(a.data[idx], (a,), bw)
    return out


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = None

    def bw():
        for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
            _accum(t, g)

    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)
    return out


# -- backward pass ----------------------------------------------------------
def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise GradientError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()
    # release the graph so intermediate buffers can be collected
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node.grad = None
