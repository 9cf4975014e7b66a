"""End-to-end experiment stages shared by the command line and the test-suite.

A configuration is a dict of sections (``data``, ``mtl``, ``flow``,
``infer``) holding plain values.  ``effective_config`` layers benchmark
presets, an INI file and explicit overrides on top of the defaults.
"""
from __future__ import annotations

import configparser
import copy
import logging
import time

import numpy as np

from .eval import band_stats, coverage, l2_relative_error
from .flows import FlowModel, train_flow
from .infer import (FewShotProblem, HMCConfig, PosteriorResult, finetune, hmc, laplace,
                    matched_alpha, posterior_mode, predictive, push_through)
from .mhnet import BodyConfig, InitStrategy, MHNetwork
from .mtl import AdamConfig, LossWeights, train_mtl, train_stl
from .problems import get_benchmark
from .problems.benchmarks import Benchmark
from .problems.dataset import Measurements, TaskDataset
from .problems.operators import network_jet
from .rng import make_rng

log = logging.getLogger(__name__)

DEFAULTS = {
    "data": {"benchmark": "fn-approx", "tasks": 100, "seed": 0, "downstream": 0, "noisy": False},
    "mtl": {"iterations": 10_000, "lr": 1e-3, "init": "rn005", "widths": "50,50,50",
            "w_f": 1.0, "w_b": 1.0, "w_u": 1.0, "l2": 0.0},
    "flow": {"kind": "maf", "epochs": 200, "batch": 100, "lr": 1e-3, "bijectors": 10,
             "hidden": "100,100", "l2": 0.0},
    "infer": {"method": "finetune", "alpha": 1.0, "iterations": 5000, "lr": 1e-2,
              "baseline": "none", "tl_l2": 1e-4, "scratch_iterations": 10_000,
              "chains": 1, "step_size": 0.1, "leapfrog": 30, "burn_in": 500, "samples": 500,
              "jitter": 0.2, "laplace_draws": 1000},
}

PRESETS = {
    "fn-approx": {"data": {"tasks": 100}},
    "pendulum": {"data": {"tasks": 100}},
    "pendulum-inverse": {"data": {"tasks": 200}},
    "fisher": {"data": {"tasks": 200}},
    "allen-cahn": {"data": {"tasks": 50}},
    "helmholtz": {"data": {"tasks": 50}},
    "helmholtz-inverse": {"data": {"tasks": 50}},
}


def _coerce(value, like):
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return str(value)


def effective_config(benchmark: str | None = None, ini_path=None, overrides=None) -> dict:
    """Defaults, then the benchmark preset, then the INI file, then ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    layers = []
    if ini_path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(ini_path):
            raise FileNotFoundError(f"cannot read config file {ini_path}")
        layers.append({s: dict(parser.items(s)) for s in parser.sections()})
    overrides = overrides or {}
    name = benchmark or overrides.get("data", {}).get("benchmark")
    for layer in layers:
        name = layer.get("data", {}).get("benchmark", name)
    name = name or cfg["data"]["benchmark"]
    get_benchmark(name)
    layers = [PRESETS.get(name, {})] + layers + [overrides]
    for layer in layers:
        for section, values in layer.items():
            if section not in cfg:
                raise KeyError(f"unknown config section [{section}]")
            for key, value in values.items():
                if value is None:
                    continue
                if key not in cfg[section]:
                    raise KeyError(f"unknown config key {section}.{key}")
                if (section, key) == ("infer", "alpha"):
                    cfg[section][key] = parse_alpha(value)
                else:
                    cfg[section][key] = _coerce(value, DEFAULTS[section][key])
    cfg["data"]["benchmark"] = name
    return cfg


def _ints(text) -> tuple:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def body_config(cfg, bench: Benchmark) -> BodyConfig:
    return BodyConfig(bench.problem.input_dim, _ints(cfg["mtl"]["widths"]))


def benchmark_of(cfg) -> Benchmark:
    return get_benchmark(cfg["data"]["benchmark"])


# stages ---------------------------------------------------------------------------

def generate(cfg) -> list[TaskDataset]:
    return benchmark_of(cfg).tasks(cfg["data"]["seed"], cfg["data"]["tasks"])


def generate_downstream(cfg, index=None, noisy=None) -> TaskDataset:
    d = cfg["data"]
    return benchmark_of(cfg).downstream(d["seed"], d["noisy"] if noisy is None else noisy,
                                        d["downstream"] if index is None else index)


def fit_mtl(cfg, tasks, seed=None) -> tuple[MHNetwork, object]:
    bench = benchmark_of(cfg)
    m = cfg["mtl"]
    seed = cfg["data"]["seed"] if seed is None else seed
    net = MHNetwork.create(body_config(cfg, bench), len(tasks), InitStrategy.parse(m["init"]), seed=seed)
    weights = LossWeights(m["w_f"], m["w_b"], m["w_u"])
    net, trace = train_mtl(net, bench.problem, tasks, AdamConfig(lr=m["lr"], iterations=m["iterations"]),
                           weights, bench.unknown, l2=m["l2"])
    net.meta["benchmark"] = bench.name
    return net, trace


def head_samples(net: MHNetwork, unknown=()) -> np.ndarray:
    """Training samples for the flow: heads, with ``log lam`` columns appended."""
    cols = [net.heads]
    for name in unknown:
        cols.append(np.asarray(net.task_params["log_" + name])[:, None])
    return np.concatenate(cols, axis=1)


def fit_flow(cfg, net: MHNetwork, seed=None):
    bench = benchmark_of(cfg)
    f = cfg["flow"]
    seed = cfg["data"]["seed"] if seed is None else seed
    X = head_samples(net, bench.unknown)
    flow = FlowModel.create(X.shape[1], f["kind"], f["bijectors"], _ints(f["hidden"]), seed=seed)
    return train_flow(flow, X, epochs=f["epochs"], batch=f["batch"], adam=AdamConfig(lr=f["lr"]),
                      seed=seed, l2=f["l2"])


def parse_alpha(value):
    """``"auto"`` or a non-negative float."""
    if str(value).strip().lower() == "auto":
        return "auto"
    a = float(value)
    if not a >= 0:
        raise ValueError("alpha must be non-negative or 'auto'")
    return a


def resolve_alpha(cfg, task) -> float:
    a = parse_alpha(cfg["infer"]["alpha"])
    if a != "auto":
        return a
    m = cfg["mtl"]
    return matched_alpha(task, benchmark_of(cfg).noise, LossWeights(m["w_f"], m["w_b"], m["w_u"]))


def few_shot_problem(cfg, net, flow, task, alpha=None, l2=0.0) -> FewShotProblem:
    bench = benchmark_of(cfg)
    m = cfg["mtl"]
    a = resolve_alpha(cfg, task) if alpha is None else alpha
    return FewShotProblem(net, bench.problem, task, flow if a > 0 or flow is not None else None,
                          alpha=a, noise=bench.noise, unknown=bench.unknown,
                          weights=LossWeights(m["w_f"], m["w_b"], m["w_u"]), l2=l2)


def _ref_grid(task):
    return np.asarray(task.reference["grid"], dtype=np.float64).reshape(len(task.reference["u"]), -1)


def _lam_metrics(bench, task, lam_est) -> dict:
    out = {}
    for name in bench.unknown:
        ref = float(task.params[name])
        est = float(lam_est[name])
        out[f"{name}_est"] = est
        out[f"{name}_ref"] = ref
        out[f"{name}_err_pct"] = 100.0 * abs(est - ref) / abs(ref)
    return out


def infer_ours(cfg, net, flow, task, method=None, rng_seed=None) -> dict:
    """Our method on a downstream task; returns metrics, prediction and posterior."""
    bench = benchmark_of(cfg)
    inf = cfg["infer"]
    method = method or inf["method"]
    seed = cfg["data"]["seed"] if rng_seed is None else rng_seed
    grid = _ref_grid(task)
    u_ref = np.asarray(task.reference["u"])
    adam = AdamConfig(lr=inf["lr"], iterations=inf["iterations"])
    out = {"method": method}
    if method == "finetune":
        fs = few_shot_problem(cfg, net, flow, task)
        res = finetune(fs, adam=adam)
        v = res.v
        u, f = push_through(fs, v[None], grid)
        out.update(prediction={"mean": u[0], "lower": u[0], "upper": u[0]}, v=v,
                   metrics={"error_u_pct": l2_relative_error(u[0], u_ref), **_lam_metrics(bench, task, fs.lam(v))})
        return out
    fs = few_shot_problem(cfg, net, flow, task, alpha=1.0)
    if method == "hmc":
        hcfg = HMCConfig(inf["step_size"], inf["leapfrog"], inf["burn_in"], inf["samples"],
                         jitter=inf["jitter"])
        mode = posterior_mode(fs, adam)
        chains = [hmc(fs, hcfg, make_rng(seed, 11, c), init=mode) for c in range(inf["chains"])]
        post = chains[0] if len(chains) == 1 else _merge_chains(chains)
        out["chains"] = chains
        draws = post.samples
        extra = {"acceptance": [c.acceptance for c in chains], "step_size": [c.step_size for c in chains]}
    elif method == "laplace":
        post = laplace(fs, adam)
        draws = post.draws(inf["laplace_draws"], make_rng(seed, 12))
        extra = {}
    else:
        raise ValueError(f"unknown inference method {method!r}")
    pred = predictive(fs, draws, grid)
    mean, band = pred["u"]["mean"], pred["u"]["band"]
    lam_mean = {n: float(np.exp(draws[:, fs.head_size + i]).mean()) for i, n in enumerate(fs.unknown)}
    out.update(posterior=post, draws=draws,
               prediction={"mean": mean, "lower": mean - band, "upper": mean + band},
               metrics={"error_u_pct": l2_relative_error(mean, u_ref),
                        "coverage": coverage(mean, band, u_ref), **_lam_metrics(bench, task, lam_mean),
                        **extra})
    return out


def _merge_chains(chains) -> PosteriorResult:
    return PosteriorResult("hmc", np.concatenate([c.samples for c in chains]),
                           np.concatenate([c.log_post for c in chains]),
                           np.concatenate([c.accepted for c in chains]),
                           float(np.mean([c.acceptance for c in chains])),
                           float(np.mean([c.step_size for c in chains])))


def infer_tl(cfg, net, task) -> dict:
    """Transfer-learning baseline: frozen body, head from zero, no flow, small ridge."""
    bench = benchmark_of(cfg)
    inf = cfg["infer"]
    fs = FewShotProblem(net, bench.problem, task, None, alpha=0.0, noise=bench.noise,
                        unknown=bench.unknown, l2=inf["tl_l2"],
                        weights=LossWeights(cfg["mtl"]["w_f"], cfg["mtl"]["w_b"], cfg["mtl"]["w_u"]))
    res = finetune(fs, init=np.zeros(fs.dim), adam=AdamConfig(lr=inf["lr"], iterations=inf["iterations"]))
    u, _ = push_through(fs, res.v[None], _ref_grid(task))
    return {"method": "tl", "v": res.v, "prediction": {"mean": u[0], "lower": u[0], "upper": u[0]},
            "metrics": {"error_u_pct": l2_relative_error(u[0], task.reference["u"]),
                        **_lam_metrics(bench, task, fs.lam(res.v))}}


def infer_scratch(cfg, task, seed=None) -> dict:
    """Single-head PINN trained on the downstream data alone."""
    bench = benchmark_of(cfg)
    m, inf = cfg["mtl"], cfg["infer"]
    seed = cfg["data"]["seed"] if seed is None else seed
    net = MHNetwork.create(body_config(cfg, bench), 1, InitStrategy.parse(m["init"]),
                           seed=int(make_rng(seed, 13).integers(2 ** 62)))
    train_mtl(net, bench.problem, [task], AdamConfig(lr=m["lr"], iterations=inf["scratch_iterations"]),
              LossWeights(m["w_f"], m["w_b"], m["w_u"]), bench.unknown)
    grid = _ref_grid(task)
    u = network_jet(bench.problem, net.theta, net.heads[0], grid)[()]
    lam = {n: float(np.exp(net.task_params["log_" + n][0])) for n in bench.unknown}
    return {"method": "scratch", "net": net, "prediction": {"mean": u, "lower": u, "upper": u},
            "metrics": {"error_u_pct": l2_relative_error(u, task.reference["u"]),
                        **_lam_metrics(bench, task, lam)}}


# evaluation helpers ------------------------------------------------------------------

def mtl_task_errors(net: MHNetwork, tasks, bench: Benchmark | None = None) -> np.ndarray:
    """L2 relative error of each head against its task's data in the richest channel."""
    errs = []
    for k, t in enumerate(tasks):
        ch = "u" if t.u is not None else "f"
        m = t.channel(ch)
        if bench is not None and ch == "f" and bench.problem.name != "fn-approx":
            raise ValueError("task errors need solution data or a regression benchmark")
        pred = net.predict(m.x, k)
        errs.append(l2_relative_error(pred, m.values))
    return np.array(errs)


def flow_function_band(net: MHNetwork, flow: FlowModel, x, n: int, seed: int) -> dict:
    S = flow.sample(n, make_rng(seed, 14))
    phi = net.features(np.asarray(x, dtype=np.float64).reshape(-1, 1))
    F = S[:, 1:net.config.head_size] @ phi.T + S[:, :1]
    return band_stats(F)


# the multi-task study -------------------------------------------------------------------

STUDY_INITS = ("rn1", "rn005", "gu")


def study_tasks(seed: int, n_tasks: int, sparse_points: int = 10):
    """Half the tasks keep ``sparse_points`` random grid points, half keep all 40."""
    bench = get_benchmark("fn-approx")
    full = bench.tasks(seed, n_tasks)
    train, flags = [], []
    for k, t in enumerate(full):
        sparse = k % 2 == 0
        if sparse:
            idx = np.sort(make_rng(seed, 15, k).choice(len(t.f), sparse_points, replace=False))
            train.append(TaskDataset(t.task_id, f=Measurements(t.f.x[idx], t.f.values[idx]), params=t.params))
        else:
            train.append(t)
        flags.append(sparse)
    return full, train, np.array(flags)


def study_mtl(cfg, n_tasks: int | None = None, inits=STUDY_INITS, stl: bool = True) -> dict:
    """Sparse/dense split: MTL per head initialization and an STL baseline."""
    seed = cfg["data"]["seed"]
    n_tasks = n_tasks or cfg["data"]["tasks"]
    full, train, sparse = study_tasks(seed, n_tasks)
    bench = get_benchmark("fn-approx")
    adam = AdamConfig(lr=cfg["mtl"]["lr"], iterations=cfg["mtl"]["iterations"])
    config = BodyConfig(1, _ints(cfg["mtl"]["widths"]))
    rows = {}

    def errors(predict):
        e = np.array([l2_relative_error(predict(k, t.f.x), t.f.values) for k, t in enumerate(full)])
        return {"sparse_mean": float(e[sparse].mean()), "sparse_std": float(e[sparse].std()),
                "dense_mean": float(e[~sparse].mean()), "dense_std": float(e[~sparse].std())}

    for name in inits:
        t0 = time.perf_counter()
        net = MHNetwork.create(config, n_tasks, InitStrategy.parse(name), seed=seed)
        train_mtl(net, bench.problem, train, adam)
        rows["mtl-" + InitStrategy.parse(name).label] = errors(lambda k, x: net.predict(x, k))
        log.info("study %s done in %.1fs", name, time.perf_counter() - t0)
    if stl:
        nets = train_stl(bench.problem, train, config, InitStrategy.parse(cfg["mtl"]["init"]), adam, seed=seed)
        rows["stl"] = errors(lambda k, x: nets[k].predict(x, 0))
    return {"n_tasks": n_tasks, "rows": rows}
