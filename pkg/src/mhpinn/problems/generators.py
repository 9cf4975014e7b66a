"""Stochastic generators for the benchmark families."""
from __future__ import annotations

import functools
import math

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from ..errors import NumericalError

FN_GRID = np.linspace(-1.0, 1.0, 40)


def function_family(x, A, omega, beta):
    """``A cos(omega x) + 2 beta x``."""
    return A * np.cos(omega * np.asarray(x)) + 2.0 * beta * np.asarray(x)


def sample_function_family(n: int, rng: np.random.Generator, grid=FN_GRID):
    """Draw ``n`` members; returns ``(params (n, 3), table (n, len(grid)))``.

    ``A ~ U[1, 3)``, ``omega ~ U[2 pi, 4 pi)``, ``beta = +-1`` with equal odds.
    """
    if n < 1:
        raise ValueError("n must be positive")
    A = rng.uniform(1.0, 3.0, n)
    omega = rng.uniform(2 * math.pi, 4 * math.pi, n)
    beta = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    params = np.stack([A, omega, beta], axis=1)
    table = function_family(np.asarray(grid)[None, :], A[:, None], omega[:, None], beta[:, None])
    return params, table


def family_moments(x):
    """Analytic pointwise mean and std of the function family."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = 2 * math.pi, 4 * math.pi

    def mean_cos(c):
        out = np.ones_like(x)
        nz = np.abs(x) > 1e-12
        out[nz] = (np.sin(c * hi * x[nz]) - np.sin(c * lo * x[nz])) / (c * (hi - lo) * x[nz])
        return out

    e_cos = mean_cos(1.0)
    e_cos2 = 0.5 + 0.5 * mean_cos(2.0)
    e_a, e_a2 = 2.0, 13.0 / 3.0
    mean = e_a * e_cos
    var = e_a2 * e_cos2 - mean ** 2 + 4.0 * x ** 2
    return mean, np.sqrt(var)


def sq_exp_kernel(x, y, length: float) -> np.ndarray:
    d = np.subtract.outer(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    return np.exp(-d ** 2 / (2.0 * length ** 2))


def gp_cholesky(grid, length: float) -> np.ndarray:
    """Lower Cholesky factor of the kernel matrix, escalating jitter 1e-10 .. 1e-6."""
    if length <= 0:
        raise ValueError("correlation length must be positive")
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(grid) < 0):
        raise ValueError("grid must be sorted")
    K = sq_exp_kernel(grid, grid, length)
    jitter = 1e-10
    while jitter <= 1e-6 * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * np.eye(len(grid)))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError("Cholesky factorisation failed with jitter up to 1e-6")


def sample_gp(length: float, grid, rng: np.random.Generator, n: int | None = None):
    """Zero-mean squared-exponential GP draw(s) on ``grid``."""
    chol = gp_cholesky(grid, length)
    z = rng.standard_normal((len(grid),) if n is None else (n, len(grid)))
    return z @ chol.T


class KLBasis:
    """Leading Karhunen-Loeve modes of the squared-exponential kernel on [0, 1].

    Modes come from a Nystrom discretisation with trapezoid weights, solved
    with a Lanczos eigensolver; ``eigenfunctions`` evaluates them anywhere
    through the Nystrom interpolant.
    """

    def __init__(self, length: float = 0.1, n_terms: int = 5, n_nodes: int = 401):
        self.length = length
        self.nodes = np.linspace(0.0, 1.0, n_nodes)
        w = np.full(n_nodes, 1.0 / (n_nodes - 1))
        w[[0, -1]] *= 0.5
        self.weights = w
        sw = np.sqrt(w)
        A = sw[:, None] * sq_exp_kernel(self.nodes, self.nodes, length) * sw[None, :]
        vals, vecs = scipy.sparse.linalg.eigsh(A, k=n_terms, which="LA",
                                               v0=np.ones(n_nodes), tol=1e-13)
        order = np.argsort(vals)[::-1]
        self.eigenvalues = vals[order]
        modes = vecs[:, order] / sw[:, None]
        # fix signs so each mode starts positive
        first = np.array([m[np.argmax(np.abs(m) > 1e-8 * np.abs(m).max())] for m in modes.T])
        self.node_values = modes * np.sign(first)[None, :]

    def eigenfunctions(self, t) -> np.ndarray:
        """Modes at ``t``, shape ``(len(t), n_terms)``, unit L2 norm on [0, 1]."""
        K = sq_exp_kernel(np.atleast_1d(t), self.nodes, self.length)
        return (K * self.weights[None, :]) @ self.node_values / self.eigenvalues[None, :]

    def evaluate(self, xi, t) -> np.ndarray:
        return self.eigenfunctions(t) @ (np.sqrt(self.eigenvalues) * np.asarray(xi))


@functools.lru_cache(maxsize=4)
def kl_basis(length: float = 0.1, n_terms: int = 5) -> KLBasis:
    return KLBasis(length, n_terms)


def trapezoid(values, x) -> float:
    return float(np.trapezoid(values, x))


def pendulum_lambda(f_values, t) -> float:
    """``0.5 * exp(int f^2)`` by the trapezoid rule."""
    return 0.5 * math.exp(trapezoid(np.asarray(f_values) ** 2, t))


def sample_kl_source(rng: np.random.Generator, grid=None, length: float = 0.1, n_terms: int = 5):
    """Five-term KL source for the inverse pendulum.

    Returns ``(f table on grid, lam, xi)``.
    """
    grid = np.linspace(0.0, 1.0, 33) if grid is None else np.asarray(grid)
    basis = kl_basis(length, n_terms)
    xi = rng.standard_normal(n_terms)
    f = basis.evaluate(xi, grid)
    return f, pendulum_lambda(f, grid), xi


def helmholtz_source(xi, x, y):
    """Random-Fourier source; ``xi`` has length ``d`` divisible by 4."""
    xi = np.asarray(xi, dtype=np.float64)
    d = xi.size
    if d % 4:
        raise ValueError("source dimension must be divisible by 4")
    q = d // 4
    x = np.asarray(x, dtype=np.float64)[..., None]
    y = np.asarray(y, dtype=np.float64)[..., None]
    i = np.arange(1, q + 1)
    s = (xi[:q] * np.sin(i * x) + xi[q:2 * q] * np.cos(i * x)
         + xi[2 * q:3 * q] * np.sin(i * y) + xi[3 * q:] * np.cos(i * y))
    return (2.0 / d) * s.sum(axis=-1)


def sample_helmholtz_source(rng: np.random.Generator, d: int = 20):
    """``xi ~ U[0, 1)^d`` and the source evaluator ``f(x, y)``."""
    if d % 4:
        raise ValueError("source dimension must be divisible by 4")
    xi = rng.random(d)
    return xi, functools.partial(helmholtz_source, xi)


def fisher_initial(xi, x):
    """``(x^2 - 1) / 5 * sum_j xi_j (cos^2(j x) - 1)``."""
    x = np.asarray(x, dtype=np.float64)[..., None]
    j = np.arange(1, len(xi) + 1)
    return ((x[..., 0] ** 2 - 1.0) / 5.0) * (np.asarray(xi) * (np.cos(j * x) ** 2 - 1.0)).sum(-1)


def allen_cahn_solution(xi, x, y):
    """``(1/5) sum_j xi_j sin(j pi x) sin(j pi y) / (j pi)^2`` and its Laplacian."""
    x = np.asarray(x, dtype=np.float64)[..., None]
    y = np.asarray(y, dtype=np.float64)[..., None]
    j = np.arange(1, len(xi) + 1)
    modes = np.sin(j * math.pi * x) * np.sin(j * math.pi * y)
    u = (np.asarray(xi) * modes / (j * math.pi) ** 2).sum(-1) / 5.0
    lap = -2.0 * (np.asarray(xi) * modes).sum(-1) / 5.0
    return u, lap


def allen_cahn_source(xi, x, y, lam: float = 0.1):
    u, lap = allen_cahn_solution(xi, x, y)
    return lam * lap + u * (u * u - 1.0)


def add_noise(table, scale: float, rng: np.random.Generator):
    """i.i.d. ``N(0, scale^2)`` added to every entry."""
    if scale < 0:
        raise ValueError("noise scale must be non-negative")
    table = np.asarray(table, dtype=np.float64)
    if scale == 0:
        return table.copy()
    return table + rng.normal(0.0, scale, size=table.shape)
