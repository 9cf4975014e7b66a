"""Scalar reverse-mode graph with dual-number payloads.

Every ``Value`` holds a payload, which is either a float or a ``Dual``.
Local partials are computed with the same number type, so running a
reverse pass over a graph built from ``Dual`` payloads yields the tangent
(directional derivative) of every gradient entry.  That is the
forward-over-reverse route used for second input derivatives.
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteError

_generation = itertools.count(1)


class Dual:
    """Forward-mode number ``primal + tangent * eps`` with ``eps**2 == 0``."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal: float, tangent: float = 0.0):
        self.primal = float(primal)
        self.tangent = float(tangent)

    def __repr__(self):
        return f"Dual({self.primal!r}, {self.tangent!r})"

    @staticmethod
    def _lift(other):
        return other if isinstance(other, Dual) else Dual(other, 0.0)

    def __add__(self, other):
        other = Dual._lift(other)
        return Dual(self.primal + other.primal, self.tangent + other.tangent)

    __radd__ = __add__

    def __sub__(self, other):
        other = Dual._lift(other)
        return Dual(self.primal - other.primal, self.tangent - other.tangent)

    def __rsub__(self, other):
        return Dual._lift(other) - self

    def __neg__(self):
        return Dual(-self.primal, -self.tangent)

    def __mul__(self, other):
        other = Dual._lift(other)
        return Dual(self.primal * other.primal,
                    self.primal * other.tangent + self.tangent * other.primal)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Dual._lift(other)
        q = self.primal / other.primal
        return Dual(q, (self.tangent - q * other.tangent) / other.primal)

    def __rtruediv__(self, other):
        return Dual._lift(other) / self

    def __pow__(self, p):
        if isinstance(p, Dual):
            return exp(p * log(self))
        v = self.primal ** p
        return Dual(v, p * self.primal ** (p - 1) * self.tangent)

    def __gt__(self, other):
        return self.primal > _primal(other)

    def __lt__(self, other):
        return self.primal < _primal(other)

    def __float__(self):
        return self.primal


def _primal(a) -> float:
    return a.primal if isinstance(a, Dual) else float(a)


# elementary functions on float or Dual payloads

def tanh(a):
    if isinstance(a, Dual):
        t = math.tanh(a.primal)
        return Dual(t, (1.0 - t * t) * a.tangent)
    return math.tanh(a)


def sin(a):
    if isinstance(a, Dual):
        return Dual(math.sin(a.primal), math.cos(a.primal) * a.tangent)
    return math.sin(a)


def cos(a):
    if isinstance(a, Dual):
        return Dual(math.cos(a.primal), -math.sin(a.primal) * a.tangent)
    return math.cos(a)


def exp(a):
    if isinstance(a, Dual):
        e = math.exp(a.primal)
        return Dual(e, e * a.tangent)
    return math.exp(a)


def log(a):
    if isinstance(a, Dual):
        return Dual(math.log(a.primal), a.tangent / a.primal)
    return math.log(a)


class Value:
    """Node of the scalar graph.

    ``parents`` is a tuple of ``(node, local_partial)`` pairs.
    """

    __slots__ = ("payload", "parents", "tape_id", "grad", "op")

    def __init__(self, payload, parents=(), op="leaf", tape_id=None):
        self.payload = payload
        self.parents = parents
        self.op = op
        if tape_id is None:
            tape_id = parents[0][0].tape_id if parents else 0
        self.tape_id = tape_id
        self.grad = 0.0
        p = _primal(payload)
        if not math.isfinite(p):
            raise NonFiniteError(f"non-finite value {p!r} produced by '{op}'")

    def __repr__(self):
        return f"Value({self.payload!r}, op={self.op!r})"

    @property
    def value(self) -> float:
        return _primal(self.payload)

    # arithmetic -----------------------------------------------------------

    def _node(self, payload, parents, op):
        tags = {p.tape_id for p, _ in parents if p.tape_id}
        if len(tags) > 1:
            raise ValueError("values from different tapes cannot be combined")
        return Value(payload, tuple(parents), op, tags.pop() if tags else 0)

    def __add__(self, other):
        other = _wrap(other)
        return self._node(self.payload + other.payload,
                          [(self, 1.0), (other, 1.0)], "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        return self._node(self.payload - other.payload,
                          [(self, 1.0), (other, -1.0)], "sub")

    def __rsub__(self, other):
        return _wrap(other) - self

    def __neg__(self):
        return self._node(-self.payload, [(self, -1.0)], "neg")

    def __mul__(self, other):
        other = _wrap(other)
        return self._node(self.payload * other.payload,
                          [(self, other.payload), (other, self.payload)], "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        if _primal(other.payload) == 0.0:
            raise NonFiniteError("division by zero in 'div'")
        inv = 1.0 / other.payload
        out = self.payload * inv
        return self._node(out, [(self, inv), (other, -out * inv)], "div")

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __pow__(self, p):
        if isinstance(p, Value):
            return vexp(vlog(self) * p)
        if _primal(self.payload) < 0.0 and float(p) != int(p):
            raise NonFiniteError("negative base with fractional exponent in 'pow'")
        try:
            out = self.payload ** p
            local = p * self.payload ** (p - 1)
        except (ZeroDivisionError, ValueError, OverflowError) as exc:
            raise NonFiniteError(f"invalid operand for 'pow': {exc}") from None
        return self._node(out, [(self, local)], "pow")

    def tanh(self):
        t = tanh(self.payload)
        return self._node(t, [(self, 1.0 - t * t)], "tanh")

    def sin(self):
        return self._node(sin(self.payload), [(self, cos(self.payload))], "sin")

    def cos(self):
        return self._node(cos(self.payload), [(self, -sin(self.payload))], "cos")

    def exp(self):
        try:
            e = exp(self.payload)
        except OverflowError:
            raise NonFiniteError("overflow in 'exp'") from None
        return self._node(e, [(self, e)], "exp")

    def log(self):
        if _primal(self.payload) <= 0.0:
            raise NonFiniteError(f"non-positive argument {self.value!r} to 'log'")
        return self._node(log(self.payload), [(self, 1.0 / self.payload)], "log")

    def relu(self):
        # subgradient at 0 is 0
        if _primal(self.payload) > 0.0:
            return self._node(self.payload, [(self, 1.0)], "relu")
        return self._node(0.0 * self.payload, [(self, 0.0)], "relu")

    # reverse pass ------------------------------------------------------

    def backward(self):
        order = _topological(self)
        for node in order:
            node.grad = 0.0
        self.grad = 1.0
        for node in reversed(order):
            g = node.grad
            for parent, local in node.parents:
                parent.grad = parent.grad + g * local


def _wrap(x) -> Value:
    return x if isinstance(x, Value) else Value(x, op="const")


def _topological(root: Value) -> list[Value]:
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def vtanh(v):
    return _wrap(v).tanh()


def vsin(v):
    return _wrap(v).sin()


def vcos(v):
    return _wrap(v).cos()


def vexp(v):
    return _wrap(v).exp()


def vlog(v):
    return _wrap(v).log()


def vrelu(v):
    return _wrap(v).relu()


def vsum(values: Sequence[Value]) -> Value:
    values = [_wrap(v) for v in values]
    total = values[0].payload
    for v in values[1:]:
        total = total + v.payload
    return values[0]._node(total, [(v, 1.0) for v in values], "sum")


def new_tape() -> int:
    """Fresh generation tag for a set of leaves."""
    return next(_generation)


def leaves(xs, tape_id: int | None = None, tangents=None) -> list[Value]:
    tid = new_tape() if tape_id is None else tape_id
    if tangents is None:
        return [Value(float(x), op="input", tape_id=tid) for x in xs]
    return [Value(Dual(x, t), op="input", tape_id=tid) for x, t in zip(xs, tangents)]


def grad(f: Callable[[list[Value]], Value], x) -> np.ndarray:
    """Gradient of the scalar function ``f`` at ``x`` by one reverse pass."""
    x = np.asarray(x, dtype=np.float64).ravel()
    xs = leaves(x)
    out = _wrap(f(xs))
    out.backward()
    return np.array([_primal(v.grad) for v in xs])


def second_input_derivative(net: Callable[[list[Value]], Value], x, i: int, j: int) -> float:
    """d^2 net / dx_i dx_j by pushing a unit tangent in x_j through a reverse pass."""
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"input indices ({i}, {j}) out of range for dimension {n}")
    xs = leaves(x, tangents=[1.0 if k == j else 0.0 for k in range(n)])
    out = _wrap(net(xs))
    out.backward()
    g = xs[i].grad
    return g.tangent if isinstance(g, Dual) else 0.0
