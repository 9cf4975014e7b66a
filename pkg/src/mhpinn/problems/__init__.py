"""Benchmark problems: operators, constraints, generators and reference solvers."""
from __future__ import annotations

import numpy as np

from . import generators, solvers
from .benchmarks import BENCHMARKS, Benchmark, get_benchmark, mesh
from .dataset import Measurements, TaskDataset, read_tasks, write_tasks
from .generators import (add_noise, sample_function_family, sample_gp, sample_helmholtz_source,
                         sample_kl_source)
from .operators import (PROBLEMS, AllenCahn, Fisher, FunctionRegression, Helmholtz, Pendulum,
                        Problem, apply_hard_constraints, constrain, network_jet, residual)


def reference_solve(problem: Problem | str, source, params=None, **grids):
    """Dispatch to the reference solver of a benchmark operator.

    ``source`` is the tabulated stochastic input: the forcing for the
    pendulum (``t_grid``, optional ``f_grid``), the initial profile for
    Fisher (``t_grid``, ``x_grid``), or the source table on a square mesh for
    Allen-Cahn and Helmholtz.
    """
    name = problem if isinstance(problem, str) else problem.name
    params = dict(params or {})
    if name == "pendulum":
        u, _ = solvers.solve_pendulum(source, grids["t_grid"], params.get("lam", 1.0),
                                      f_grid=grids.get("f_grid", grids["t_grid"]))
        return u
    if name == "fisher":
        return solvers.solve_fisher(source, grids["t_grid"], grids["x_grid"],
                                    params.get("D", 0.1), params.get("k", 0.1))
    if name == "allen-cahn":
        return solvers.solve_allen_cahn(np.asarray(source), params.get("lam", 0.1))
    if name == "helmholtz":
        return solvers.solve_helmholtz(np.asarray(source), params.get("lam", 1.0) ** 2)
    raise ValueError(f"no reference solver for {name!r}")


__all__ = [
    "BENCHMARKS", "Benchmark", "get_benchmark", "mesh", "Measurements", "TaskDataset",
    "read_tasks", "write_tasks", "add_noise", "sample_function_family", "sample_gp",
    "sample_helmholtz_source", "sample_kl_source", "PROBLEMS", "AllenCahn", "Fisher",
    "FunctionRegression", "Helmholtz", "Pendulum", "Problem", "apply_hard_constraints",
    "constrain", "network_jet", "residual", "reference_solve", "generators", "solvers",
]
