"""Reverse-mode differentiation over numpy arrays.

The scalar graph in :mod:`.scalar` is exact but far too slow for training
a 3x50 body on thousands of collocation points, so the training loops
record whole-array operations here instead.  Input derivatives of the
network are obtained by propagating derivative channels through the
forward pass as ordinary recorded operations (see
:func:`mhpinn.mhnet.body_jet`), so parameter gradients of residual losses
come out of one reverse sweep.

The module-level functions (``tanh``, ``sin``, ...) accept plain arrays as
well, in which case they fall through to numpy.  Loss code written against
them runs unchanged with or without a tape.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, _prev=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward = _backward

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        order = _topological(self)
        for node in order:
            node.grad = None
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operators
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._prev:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def param(data) -> Tensor:
    """Leaf that collects gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _needs(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def _accum(t: Tensor, g):
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _result(out, parents, backward) -> Tensor | np.ndarray:
    live = tuple(p for p in parents if _needs(p))
    if not live:
        return Tensor(out) if any(isinstance(p, Tensor) for p in parents) else out
    return Tensor(out, True, live, backward)


def _is_array_path(*xs) -> bool:
    return not any(isinstance(x, Tensor) for x in xs)


# binary ops ---------------------------------------------------------------

def add(a, b):
    if _is_array_path(a, b):
        return np.add(a, b)
    ad, bd = _data(a), _data(b)

    def backward(g):
        if _needs(a):
            _accum(a, _unbroadcast(g, ad.shape))
        if _needs(b):
            _accum(b, _unbroadcast(g, bd.shape))
    return _result(ad + bd, (a, b), backward)


def sub(a, b):
    if _is_array_path(a, b):
        return np.subtract(a, b)
    ad, bd = _data(a), _data(b)

    def backward(g):
        if _needs(a):
            _accum(a, _unbroadcast(g, ad.shape))
        if _needs(b):
            _accum(b, _unbroadcast(-g, bd.shape))
    return _result(ad - bd, (a, b), backward)


def mul(a, b):
    if _is_array_path(a, b):
        return np.multiply(a, b)
    ad, bd = _data(a), _data(b)

    def backward(g):
        if _needs(a):
            _accum(a, _unbroadcast(g * bd, ad.shape))
        if _needs(b):
            _accum(b, _unbroadcast(g * ad, bd.shape))
    return _result(ad * bd, (a, b), backward)


def div(a, b):
    if _is_array_path(a, b):
        return np.divide(a, b)
    ad, bd = _data(a), _data(b)
    out = ad / bd

    def backward(g):
        if _needs(a):
            _accum(a, _unbroadcast(g / bd, ad.shape))
        if _needs(b):
            _accum(b, _unbroadcast(-g * out / bd, bd.shape))
    return _result(out, (a, b), backward)


def power(a, p: float):
    if _is_array_path(a):
        return np.power(a, p)
    ad = _data(a)
    out = ad ** p

    def backward(g):
        _accum(a, g * p * ad ** (p - 1))
    return _result(out, (a,), backward)


def matmul(a, b):
    if _is_array_path(a, b):
        return np.matmul(a, b)
    ad, bd = _data(a), _data(b)

    def backward(g):
        if _needs(a):
            if bd.ndim == 1:
                _accum(a, np.outer(g, bd) if ad.ndim == 2 else g * bd)
            else:
                _accum(a, g @ bd.T if ad.ndim == 2 else bd @ g)
        if _needs(b):
            if ad.ndim == 1:
                _accum(b, np.outer(ad, g) if bd.ndim == 2 else g * ad)
            else:
                _accum(b, ad.T @ g if bd.ndim == 2 else ad.T @ g)
    return _result(ad @ bd, (a, b), backward)


# unary ops ------------------------------------------------------------------

def _unary(x, fwd, dfwd):
    if _is_array_path(x):
        return fwd(np.asarray(x, dtype=np.float64))
    xd = x.data
    out = fwd(xd)

    def backward(g):
        _accum(x, g * dfwd(xd, out))
    return _result(out, (x,), backward)


def tanh(x):
    return _unary(x, np.tanh, lambda xd, y: 1.0 - y * y)


def sin(x):
    return _unary(x, np.sin, lambda xd, y: np.cos(xd))


def cos(x):
    return _unary(x, np.cos, lambda xd, y: -np.sin(xd))


def exp(x):
    return _unary(x, np.exp, lambda xd, y: y)


def log(x):
    return _unary(x, np.log, lambda xd, y: 1.0 / xd)


def relu(x):
    # subgradient 0 at 0
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda xd, y: (xd > 0.0).astype(np.float64))


def square(x):
    return _unary(x, np.square, lambda xd, y: 2.0 * xd)


def tsum(x, axis=None, keepdims=False):
    if _is_array_path(x):
        return np.sum(x, axis=axis, keepdims=keepdims)
    xd = x.data
    out = xd.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, xd.shape).copy())
    return _result(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    n = _data(x).size if axis is None else _data(x).shape[axis]
    return tsum(x, axis, keepdims) * (1.0 / n)


# structural ops -----------------------------------------------------------

def getitem(x, idx):
    if _is_array_path(x):
        return np.asarray(x)[idx]
    xd = x.data
    out = xd[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(xd)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        _accum(x, full)
    return _result(out, (x,), backward)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def transpose(x):
    if _is_array_path(x):
        return np.asarray(x).T

    def backward(g):
        _accum(x, g.T)
    return _result(x.data.T, (x,), backward)


def reshape(x, shape):
    if _is_array_path(x):
        return np.reshape(x, shape)
    old = x.data.shape

    def backward(g):
        _accum(x, g.reshape(old))
    return _result(x.data.reshape(shape), (x,), backward)


def concat(xs: Sequence, axis: int = 0):
    if _is_array_path(*xs):
        return np.concatenate(xs, axis=axis)
    datas = [_data(x) for x in xs]
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            if _needs(x):
                _accum(x, part)
    return _result(np.concatenate(datas, axis=axis), tuple(xs), backward)


def scatter_matrix(index: np.ndarray, n_rows: int) -> sp.csr_matrix:
    """Sparse ``(n_rows, len(index))`` 0/1 matrix that sums entries into rows."""
    m = len(index)
    return sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n_rows, m))


def take_rows(x, index: np.ndarray, scatter: sp.csr_matrix | None = None):
    """``x[index]`` along axis 0; the reverse pass is a sparse segment sum."""
    if _is_array_path(x):
        return np.asarray(x)[index]
    xd = x.data

    def backward(g):
        s = scatter if scatter is not None else scatter_matrix(index, xd.shape[0])
        _accum(x, np.asarray(s @ g).reshape(xd.shape))
    return _result(xd[index], (x,), backward)


def where(cond: np.ndarray, a, b):
    if _is_array_path(a, b):
        return np.where(cond, a, b)
    ad, bd = _data(a), _data(b)

    def backward(g):
        if _needs(a):
            _accum(a, _unbroadcast(np.where(cond, g, 0.0), ad.shape))
        if _needs(b):
            _accum(b, _unbroadcast(np.where(cond, 0.0, g), bd.shape))
    return _result(np.where(cond, ad, bd), (a, b), backward)


# helpers --------------------------------------------------------------------

def value_and_grad(f: Callable, *params: np.ndarray):
    """Evaluate scalar ``f(*tensors)`` and its gradient w.r.t. each argument."""
    leaves = [param(p) for p in params]
    out = f(*leaves)
    out.backward()
    grads = [np.zeros_like(l.data) if l.grad is None else l.grad for l in leaves]
    return out.item(), grads


def jacobian(f: Callable, x: np.ndarray) -> np.ndarray:
    """Dense Jacobian of a vector function of a vector, one reverse pass per row."""
    x = np.asarray(x, dtype=np.float64)
    leaf = param(x)
    out = f(leaf)
    od = _data(out)
    jac = np.zeros((od.size, x.size))
    if not isinstance(out, Tensor) or not out.requires_grad:
        return jac
    for i in range(od.size):
        seed = np.zeros_like(od)
        seed.flat[i] = 1.0
        out.backward(seed)
        if leaf.grad is not None:
            jac[i] = leaf.grad.ravel()
    return jac
