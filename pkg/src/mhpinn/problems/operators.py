"""Differential operators and hard-encoded constraints of the benchmarks.

A jet is a dict mapping a derivative key to an array: ``()`` for the value,
``(i,)`` for d/dx_i and ``(i, i)`` for d^2/dx_i^2.  Operators only read the
keys listed in ``first``/``second`` and are written with the functions of
:mod:`mhpinn.autodiff.tape`, so they evaluate on arrays and on tape tensors.
"""
from __future__ import annotations

import math

import numpy as np

from ..autodiff import tape as ad


class Problem:
    name = "problem"
    input_dim = 1
    bounds: tuple = ((0.0, 1.0),)
    first: tuple = ()
    second: tuple = ()
    defaults: dict = {}

    def constraint(self, X: np.ndarray):
        """Jet of the multiplier ``g`` at ``X``, or ``None`` for no constraint."""
        return None

    def operator(self, u: dict, X: np.ndarray, params: dict):
        raise NotImplementedError

    def boundary(self, u: dict, X: np.ndarray):
        return u[()]

    @property
    def jet_keys(self) -> tuple:
        keys = [()]
        keys += [(i,) for i in sorted(set(self.first) | set(self.second))]
        keys += [(i, i) for i in self.second]
        return tuple(keys)

    def __repr__(self):
        return f"{type(self).__name__}()"


def constrain(g: dict | None, raw: dict, offset: dict | None = None) -> dict:
    """Jet of ``g * raw + offset`` from the jets of its factors (product rule)."""
    if g is None:
        out = dict(raw)
    else:
        out = {}
        for key, r in raw.items():
            if key == ():
                out[key] = g[()] * r
            elif len(key) == 1:
                out[key] = g[key] * raw[()] + g[()] * r
            else:
                i = (key[0],)
                out[key] = g[key] * raw[()] + 2.0 * g[i] * raw[i] + g[()] * r
    if offset is not None:
        out = {k: v + offset[k] if k in offset else v for k, v in out.items()}
    return out


class FunctionRegression(Problem):
    """Identity operator: the f-channel is plain regression."""

    name = "fn-approx"
    input_dim = 1
    bounds = ((-1.0, 1.0),)

    def operator(self, u, X, params):
        return u[()]


class Pendulum(Problem):
    """``u_tt + lam * sin(u) = f`` with ``u(0) = u_t(0) = 0``."""

    name = "pendulum"
    input_dim = 1
    bounds = ((0.0, 1.0),)
    first = (0,)
    second = (0,)
    defaults = {"lam": 1.0}

    def constraint(self, X):
        t = X[:, 0]
        return {(): t * t, (0,): 2.0 * t, (0, 0): np.full_like(t, 2.0)}

    def operator(self, u, X, params):
        return u[(0, 0)] + params["lam"] * ad.sin(u[()])


class Fisher(Problem):
    """``u_t - D u_xx - k u (1 - u) = 0`` on ``(t, x)``, zero Dirichlet in x."""

    name = "fisher"
    input_dim = 2
    bounds = ((0.0, 1.0), (-1.0, 1.0))
    first = (0,)
    second = (1,)
    defaults = {"D": 0.1, "k": 0.1}

    def constraint(self, X):
        x = X[:, 1]
        zero = np.zeros_like(x)
        return {(): 1.0 - x * x, (0,): zero, (1,): -2.0 * x, (1, 1): np.full_like(x, -2.0)}

    def operator(self, u, X, params):
        v = u[()]
        return u[(0,)] - params["D"] * u[(1, 1)] - params["k"] * v * (1.0 - v)


class AllenCahn(Problem):
    """``lam * (u_xx + u_yy) + u (u^2 - 1) = f`` on the unit square, zero Dirichlet."""

    name = "allen-cahn"
    input_dim = 2
    bounds = ((0.0, 1.0), (0.0, 1.0))
    second = (0, 1)
    defaults = {"lam": 0.1}

    def constraint(self, X):
        x, y = X[:, 0], X[:, 1]
        a, b = x * (1.0 - x), y * (1.0 - y)
        return {(): a * b, (0,): (1.0 - 2.0 * x) * b, (1,): a * (1.0 - 2.0 * y),
                (0, 0): -2.0 * b, (1, 1): -2.0 * a}

    def operator(self, u, X, params):
        v = u[()]
        return params["lam"] * (u[(0, 0)] + u[(1, 1)]) + v * (v * v - 1.0)


class Helmholtz(Problem):
    """``lam^2 u - (u_xx + u_yy) = f`` on ``[0, 2 pi]^2``, zero Dirichlet."""

    name = "helmholtz"
    input_dim = 2
    bounds = ((0.0, 2 * math.pi), (0.0, 2 * math.pi))
    second = (0, 1)
    defaults = {"lam": 1.0}

    def constraint(self, X):
        sx, cx = np.sin(X[:, 0] / 2), np.cos(X[:, 0] / 2)
        sy, cy = np.sin(X[:, 1] / 2), np.cos(X[:, 1] / 2)
        return {(): sx * sy, (0,): 0.5 * cx * sy, (1,): 0.5 * sx * cy,
                (0, 0): -0.25 * sx * sy, (1, 1): -0.25 * sx * sy}

    def operator(self, u, X, params):
        lam = params["lam"]
        return lam * lam * u[()] - (u[(0, 0)] + u[(1, 1)])


def apply_hard_constraints(problem: Problem, raw, X):
    """Constrained surrogate ``g(x) * raw(x)``.

    ``raw`` is either a jet dict or the raw value array; the return value has
    the same form.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    g = problem.constraint(X)
    if isinstance(raw, dict):
        if g is None:
            return dict(raw)
        return constrain({k: v for k, v in g.items()}, raw)
    return raw if g is None else g[()] * raw


def network_jet(problem: Problem, theta, head, X):
    """Constrained jet of a single-head surrogate at the rows of ``X``."""
    from ..mhnet import body_jet

    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    feats = body_jet(theta, X, first=problem.first, second=problem.second)
    head = np.asarray(head)
    raw = {k: v @ head[1:] + (head[0] if k == () else 0.0) for k, v in feats.items()}
    g = problem.constraint(X)
    return constrain(g, raw) if g is not None else raw


def residual(problem: Problem, theta, head, params, X, f=None):
    """``F[u](x) - f(x)`` for the single-head surrogate (``f`` omitted means zero)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    p = dict(problem.defaults)
    p.update(params or {})
    try:
        out = problem.operator(network_jet(problem, theta, head, X), X, p)
    except KeyError as exc:
        raise ValueError(f"{problem.name} needs derivative {exc.args[0]} which is not available") from exc
    return out if f is None else out - np.asarray(f)


PROBLEMS = {
    "fn-approx": FunctionRegression,
    "pendulum": Pendulum,
    "fisher": Fisher,
    "allen-cahn": AllenCahn,
    "helmholtz": Helmholtz,
}
