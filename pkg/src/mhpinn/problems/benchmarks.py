"""Benchmark families: training tasks, downstream tasks and evaluation grids.

Every generator is a pure function of ``(seed, task index)``; downstream
tasks use a separate stream so they never coincide with a training task.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..rng import make_rng
from . import generators as gen
from . import solvers
from .dataset import Measurements, TaskDataset
from .operators import AllenCahn, Fisher, FunctionRegression, Helmholtz, Pendulum, Problem

DOWNSTREAM_STREAM = 10_000_019


def mesh(xs, ys) -> np.ndarray:
    """Points of the tensor grid, ``x`` major."""
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=1)


@dataclass
class Benchmark:
    name: str
    problem: Problem
    options: dict = field(default_factory=dict)
    unknown: tuple = ()
    noise: dict = field(default_factory=dict)

    def opt(self, key):
        return self.options[key]

    def with_options(self, **overrides) -> "Benchmark":
        unknown_keys = set(overrides) - set(self.options)
        if unknown_keys:
            raise KeyError(f"unknown options for {self.name}: {sorted(unknown_keys)}")
        opts = dict(self.options)
        opts.update({k: v for k, v in overrides.items() if v is not None})
        return type(self)(self.name, self.problem, opts, self.unknown, dict(self.noise))

    def task(self, seed: int, k: int) -> TaskDataset:
        raise NotImplementedError

    def tasks(self, seed: int, n: int) -> list[TaskDataset]:
        if n < 1:
            raise ValueError("number of tasks must be positive")
        return [self.task(seed, k) for k in range(n)]

    def downstream(self, seed: int, noisy: bool = False, index: int = 0) -> TaskDataset:
        raise NotImplementedError

    def _noisy(self, task: TaskDataset, rng, noisy: bool) -> TaskDataset:
        if not noisy:
            return task
        for ch, scale in self.noise.items():
            m = task.channel(ch)
            if m is not None:
                setattr(task, ch, Measurements(m.x, gen.add_noise(m.values, scale, rng)))
        task.noise = dict(self.noise)
        return task


class FnApprox(Benchmark):
    def task(self, seed, k):
        rng = make_rng(seed, k)
        params, table = gen.sample_function_family(1, rng, gen.FN_GRID)
        A, w, b = params[0]
        return TaskDataset(k, f=Measurements(gen.FN_GRID[:, None], table[0]),
                           params={"A": A, "omega": w, "beta": b})

    def downstream(self, seed, noisy=False, index=0):
        targets = [(2.0, 2 * math.pi, 1.0, 4), (2.0, 4 * math.pi, -1.0, 5)]
        A, w, b, n = targets[index]
        x = np.linspace(-0.9, -0.1, self.opt("fewshot_points") or n)
        grid = np.linspace(-1.0, 1.0, 201)
        task = TaskDataset(-1 - index, f=Measurements(x[:, None], gen.function_family(x, A, w, b)),
                           params={"A": A, "omega": w, "beta": b},
                           reference={"grid": grid[:, None], "u": gen.function_family(grid, A, w, b),
                                      "f": gen.function_family(grid, A, w, b)})
        return self._noisy(task, make_rng(seed, DOWNSTREAM_STREAM, index), noisy)


class PendulumGP(Benchmark):
    """Forward pendulum with a GP source and known ``lam = 1``."""

    def task(self, seed, k):
        t = np.linspace(0.0, 1.0, self.opt("n_f"))
        f = gen.sample_gp(self.opt("length"), t, make_rng(seed, k))
        return TaskDataset(k, f=Measurements(t[:, None], f), params={"lam": 1.0})

    def downstream(self, seed, noisy=False, index=0):
        rng = make_rng(seed, DOWNSTREAM_STREAM, index)
        grid = np.linspace(0.0, 1.0, 101)
        f_grid = gen.sample_gp(self.opt("length"), grid, rng)
        u, _ = solvers.solve_pendulum(f_grid, grid, 1.0, f_grid=grid)
        idx = np.sort(rng.choice(len(grid), self.opt("fewshot_f"), replace=False))
        task = TaskDataset(-1 - index, f=Measurements(grid[idx, None], f_grid[idx]),
                           params={"lam": 1.0},
                           reference={"grid": grid[:, None], "u": u, "f": f_grid})
        return self._noisy(task, rng, noisy)


class PendulumInverse(Benchmark):
    """Pendulum with KL source and per-task ``lam = 0.5 exp(int f^2)``."""

    def _draw(self, rng):
        t_f = np.linspace(0.0, 1.0, self.opt("n_f"))
        f, lam, xi = gen.sample_kl_source(rng, t_f)
        basis = gen.kl_basis(0.1, 5)
        return t_f, f, lam, xi, (lambda t: basis.evaluate(xi, t))

    def task(self, seed, k):
        t_f, f, lam, xi, force = self._draw(make_rng(seed, k))
        t_u = np.linspace(0.0, 1.0, self.opt("n_u"))
        u, _ = solvers.solve_pendulum(lambda t: force(np.atleast_1d(t))[0], t_u, lam)
        return TaskDataset(k, f=Measurements(t_f[:, None], f), u=Measurements(t_u[:, None], u),
                           params={"lam": lam, "xi": xi})

    def downstream(self, seed, noisy=False, index=0):
        rng = make_rng(seed, DOWNSTREAM_STREAM, index)
        _, _, lam, xi, force = self._draw(rng)
        grid = np.linspace(0.0, 1.0, 101)
        u_grid, _ = solvers.solve_pendulum(lambda t: force(np.atleast_1d(t))[0], grid, lam)
        f_grid = force(grid)
        t_f = np.sort(rng.uniform(0.0, 1.0, self.opt("fewshot_f")))
        t_u = np.sort(rng.uniform(0.0, 1.0, self.opt("fewshot_u")))
        u_pts, _ = solvers.solve_pendulum(lambda t: force(np.atleast_1d(t))[0], t_u, lam)
        task = TaskDataset(-1 - index, f=Measurements(t_f[:, None], force(t_f)),
                           u=Measurements(t_u[:, None], u_pts), params={"lam": lam, "xi": xi},
                           reference={"grid": grid[:, None], "u": u_grid, "f": f_grid})
        return self._noisy(task, rng, noisy)


class FisherIC(Benchmark):
    """Fisher equation with a random initial profile."""

    def _grids(self):
        t = np.linspace(0.0, 1.0, self.opt("n_t"))
        x = np.linspace(-1.0, 1.0, self.opt("n_x"))
        return t, x

    def task(self, seed, k):
        rng = make_rng(seed, k)
        xi = rng.random(5)
        t, x = self._grids()
        pts = mesh(t, x)
        return TaskDataset(k, f=Measurements(pts, np.zeros(len(pts))),
                           b=Measurements(np.stack([np.zeros_like(x), x], 1), gen.fisher_initial(xi, x)),
                           params={"xi": xi})

    def downstream(self, seed, noisy=False, index=0):
        rng = make_rng(seed, DOWNSTREAM_STREAM, index)
        xi = rng.random(5)
        t, x = self._grids()
        pts = mesh(t, x)
        u = solvers.solve_fisher(lambda s: gen.fisher_initial(xi, s), t, x)
        xb = np.sort(rng.uniform(-1.0, 1.0, self.opt("fewshot_b")))
        task = TaskDataset(-1 - index, f=Measurements(pts, np.zeros(len(pts))),
                           b=Measurements(np.stack([np.zeros_like(xb), xb], 1), gen.fisher_initial(xi, xb)),
                           params={"xi": xi}, reference={"grid": pts, "u": u.ravel(),
                                                         "f": np.zeros(len(pts))})
        return self._noisy(task, rng, noisy)


class AllenCahnSource(Benchmark):
    def task(self, seed, k):
        xi = make_rng(seed, k).random(5)
        g = np.linspace(0.0, 1.0, self.opt("n_mesh"))
        pts = mesh(g, g)
        f = gen.allen_cahn_source(xi, pts[:, 0], pts[:, 1])
        return TaskDataset(k, f=Measurements(pts, f), params={"xi": xi})

    def downstream(self, seed, noisy=False, index=0):
        rng = make_rng(seed, DOWNSTREAM_STREAM, index)
        xi = rng.random(5)
        g = np.linspace(0.0, 1.0, self.opt("n_mesh"))
        pts = mesh(g, g)
        u, _ = gen.allen_cahn_solution(xi, pts[:, 0], pts[:, 1])
        f = gen.allen_cahn_source(xi, pts[:, 0], pts[:, 1])
        idx = np.sort(rng.choice(len(pts), self.opt("fewshot_f"), replace=False))
        task = TaskDataset(-1 - index, f=Measurements(pts[idx], f[idx]), params={"xi": xi},
                           reference={"grid": pts, "u": u, "f": f})
        return self._noisy(task, rng, noisy)


class HelmholtzSource(Benchmark):
    """Forward (``lam = 1``) or inverse (``lam^2 = int f^2``) stochastic Helmholtz."""

    @property
    def inverse(self) -> bool:
        return bool(self.unknown)

    def _reference(self, xi, lam2, n):
        fine = (n - 1) * self.opt("refine") + 1
        g = np.linspace(0.0, 2 * math.pi, fine)
        F = gen.helmholtz_source(xi, *np.meshgrid(g, g, indexing="ij"))
        return solvers.solve_helmholtz(F, lam2)[::self.opt("refine"), ::self.opt("refine")]

    def _lam2(self, xi):
        g = np.linspace(0.0, 2 * math.pi, self.opt("n_f"))
        F = gen.helmholtz_source(xi, *np.meshgrid(g, g, indexing="ij"))
        return float(np.trapezoid(np.trapezoid(F ** 2, g, axis=1), g))

    def _f_points(self):
        n = self.opt("n_f")
        if self.inverse:
            g = np.linspace(0.0, 2 * math.pi, n)
        else:
            g = np.linspace(0.0, 2 * math.pi, n + 2)[1:-1]
        return mesh(g, g)

    def task(self, seed, k):
        xi, _ = gen.sample_helmholtz_source(make_rng(seed, k), self.opt("d"))
        pts = self._f_points()
        f = gen.helmholtz_source(xi, pts[:, 0], pts[:, 1])
        if not self.inverse:
            return TaskDataset(k, f=Measurements(pts, f), params={"xi": xi, "lam": 1.0})
        lam2 = self._lam2(xi)
        n_u = self.opt("n_u")
        # u mesh is a subgrid of the reference mesh
        n_ref = (n_u - 1) * 4 + 1
        u_full = self._reference(xi, lam2, n_ref)[::4, ::4]
        gu = np.linspace(0.0, 2 * math.pi, n_u)
        return TaskDataset(k, f=Measurements(pts, f), u=Measurements(mesh(gu, gu), u_full.ravel()),
                           params={"xi": xi, "lam": math.sqrt(lam2)})

    def downstream(self, seed, noisy=False, index=0):
        rng = make_rng(seed, DOWNSTREAM_STREAM, index)
        xi, _ = gen.sample_helmholtz_source(rng, self.opt("d"))
        lam2 = self._lam2(xi) if self.inverse else 1.0
        n = self.opt("n_eval")
        g = np.linspace(0.0, 2 * math.pi, n)
        pts = mesh(g, g)
        u = self._reference(xi, lam2, n).ravel()
        f = gen.helmholtz_source(xi, pts[:, 0], pts[:, 1])
        idx_f = np.sort(rng.choice(len(pts), self.opt("fewshot_f"), replace=False))
        task = TaskDataset(-1 - index, f=Measurements(pts[idx_f], f[idx_f]),
                           params={"xi": xi, "lam": math.sqrt(lam2)},
                           reference={"grid": pts, "u": u, "f": f})
        if self.inverse:
            idx_u = np.sort(rng.choice(len(pts), self.opt("fewshot_u"), replace=False))
            task.u = Measurements(pts[idx_u], u[idx_u])
        return self._noisy(task, rng, noisy)


def _registry():
    return {
        "fn-approx": FnApprox("fn-approx", FunctionRegression(), {"fewshot_points": None},
                              noise={"f": 0.2}),
        "pendulum": PendulumGP("pendulum", Pendulum(), {"n_f": 65, "length": 0.1, "fewshot_f": 8},
                               noise={"f": 0.05}),
        "pendulum-inverse": PendulumInverse(
            "pendulum-inverse", Pendulum(), {"n_f": 33, "n_u": 9, "fewshot_f": 8, "fewshot_u": 1},
            unknown=("lam",), noise={"f": 0.05, "u": 0.005}),
        "fisher": FisherIC("fisher", Fisher(), {"n_t": 21, "n_x": 41, "fewshot_b": 5},
                           noise={"f": 0.02, "b": 0.02}),
        "allen-cahn": AllenCahnSource("allen-cahn", AllenCahn(), {"n_mesh": 51, "fewshot_f": 100},
                                      noise={"f": 0.05}),
        "helmholtz": HelmholtzSource("helmholtz", Helmholtz(),
                                     {"n_f": 50, "d": 20, "refine": 2, "n_eval": 51,
                                      "fewshot_f": 100, "n_u": 6, "fewshot_u": 10},
                                     noise={"f": 0.05}),
        "helmholtz-inverse": HelmholtzSource("helmholtz-inverse", Helmholtz(),
                                             {"n_f": 21, "d": 20, "refine": 2, "n_eval": 51,
                                              "fewshot_f": 50, "n_u": 6, "fewshot_u": 10},
                                             unknown=("lam",), noise={"f": 0.05, "u": 0.05}),
    }


BENCHMARKS = tuple(_registry())


def get_benchmark(name: str, **options) -> Benchmark:
    reg = _registry()
    if name not in reg:
        raise KeyError(f"unknown benchmark {name!r}; choose from {', '.join(reg)}")
    return reg[name].with_options(**options) if options else reg[name]
