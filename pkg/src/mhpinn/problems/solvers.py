"""Reference solvers used to produce clean data and evaluation targets."""
from __future__ import annotations

from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from ..errors import ConvergenceError


def _as_callable(f, grid) -> Callable:
    if callable(f):
        return f
    return CubicSpline(np.asarray(grid), np.asarray(f))


def solve_pendulum(f, t_eval, lam: float = 1.0, f_grid=None, tol: float = 1e-9):
    """Integrate ``u1' = u2, u2' = -lam sin(u1) + f(t)`` from rest with RK45.

    ``f`` is a callable or a table on ``f_grid`` (cubic-spline interpolated).
    Returns ``(u, u_t)`` at ``t_eval``.
    """
    t_eval = np.asarray(t_eval, dtype=np.float64)
    force = _as_callable(f, f_grid)

    def rhs(t, s):
        return [s[1], -lam * np.sin(s[0]) + float(force(t))]

    sol = solve_ivp(rhs, (0.0, float(t_eval.max())), [0.0, 0.0], method="RK45",
                    t_eval=t_eval, rtol=tol, atol=tol)
    if not sol.success:
        raise ConvergenceError(f"RK45 failed: {sol.message}")
    return sol.y[0], sol.y[1]


def solve_fisher(u0, t_grid, x_grid, D: float = 0.1, k: float = 0.1, refine: int = 4,
                 dt: float | None = None) -> np.ndarray:
    """Method of lines: central differences in x, classical RK4 in t.

    ``u0`` is a callable or a table on ``x_grid``.  The spatial grid is refined
    ``refine`` times and the result sampled back onto ``(t_grid, x_grid)``.
    Returns an array of shape ``(len(t_grid), len(x_grid))``.
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    x_grid = np.asarray(x_grid, dtype=np.float64)
    n_fine = (len(x_grid) - 1) * refine + 1
    xf = np.linspace(x_grid[0], x_grid[-1], n_fine)
    h = xf[1] - xf[0]
    u = np.asarray(_as_callable(u0, x_grid)(xf), dtype=np.float64)
    u[[0, -1]] = 0.0
    if dt is None:
        dt = 0.2 * h * h / D
    t_end = t_grid[-1]
    n_steps = int(np.ceil(t_end / dt))
    dt = t_end / n_steps

    def rhs(v):
        out = np.zeros_like(v)
        out[1:-1] = D * (v[2:] - 2 * v[1:-1] + v[:-2]) / (h * h) + k * v[1:-1] * (1 - v[1:-1])
        return out

    frames = {}
    # t_grid points on the RK4 step lattice
    marks = np.rint(t_grid / dt).astype(int)
    if marks[0] == 0:
        frames[0] = u.copy()
    for step in range(1, n_steps + 1):
        k1 = rhs(u)
        k2 = rhs(u + 0.5 * dt * k1)
        k3 = rhs(u + 0.5 * dt * k2)
        k4 = rhs(u + dt * k3)
        u = u + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        frames[step] = u.copy()
    out = np.stack([frames[m] for m in marks])
    return out[:, ::refine]


def laplacian_2d(n: int, h: float) -> sp.csr_matrix:
    """Five-point Laplacian on an ``n x n`` interior grid with zero Dirichlet data."""
    e = np.ones(n)
    d2 = sp.diags([e[:-1], -2 * e, e[:-1]], [-1, 0, 1]) / (h * h)
    eye = sp.identity(n)
    return (sp.kron(eye, d2) + sp.kron(d2, eye)).tocsr()


def solve_helmholtz(f_table: np.ndarray, lam2: float, length: float = 2 * np.pi) -> np.ndarray:
    """Direct sparse solve of ``(lam2 - Laplacian) u = f`` on a square mesh.

    ``f_table`` is ``(N, N)`` on the mesh including the boundary (boundary
    values are ignored); the returned ``u`` is zero on the boundary.
    """
    f_table = np.asarray(f_table, dtype=np.float64)
    n = f_table.shape[0]
    h = length / (n - 1)
    A = lam2 * sp.identity((n - 2) ** 2) - laplacian_2d(n - 2, h)
    u = np.zeros_like(f_table)
    u[1:-1, 1:-1] = spla.spsolve(A.tocsc(), f_table[1:-1, 1:-1].ravel()).reshape(n - 2, n - 2)
    return u


def solve_allen_cahn(f_table: np.ndarray, lam: float = 0.1, length: float = 1.0,
                     max_iter: int = 100, tol: float = 1e-10, u_init=None) -> np.ndarray:
    """Damped Newton on the five-point discretisation of ``lam Lu + u^3 - u = f``."""
    f_table = np.asarray(f_table, dtype=np.float64)
    n = f_table.shape[0]
    h = length / (n - 1)
    L = laplacian_2d(n - 2, h)
    f = f_table[1:-1, 1:-1].ravel()
    u = np.zeros_like(f) if u_init is None else np.asarray(u_init)[1:-1, 1:-1].ravel().copy()

    def residual(v):
        return lam * (L @ v) + v ** 3 - v - f

    r = residual(u)
    norm = np.linalg.norm(r, np.inf)
    for _ in range(max_iter):
        if norm < tol:
            break
        J = lam * L + sp.diags(3 * u ** 2 - 1.0)
        step = spla.spsolve(J.tocsc(), -r)
        damping = 1.0
        while damping > 1e-4:
            trial = u + damping * step
            r_trial = residual(trial)
            n_trial = np.linalg.norm(r_trial, np.inf)
            if n_trial < norm:
                break
            damping *= 0.5
        u, r, norm = trial, r_trial, n_trial
    else:
        if norm >= tol:
            raise ConvergenceError(f"Newton did not converge in {max_iter} iterations, "
                                   f"residual norm {norm:.3e}")
    if norm >= tol:
        raise ConvergenceError(f"Newton did not converge, residual norm {norm:.3e}")
    out = np.zeros_like(f_table)
    out[1:-1, 1:-1] = u.reshape(n - 2, n - 2)
    return out
