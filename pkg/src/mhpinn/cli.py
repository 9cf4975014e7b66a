"""Command-line driver: ``mhpinn generate | train | infer | study-mtl | eval``.

Every command takes ``--benchmark``, ``--config`` (INI file with sections
``[data] [mtl] [flow] [infer]``), ``--seed`` and ``--threads``; explicit
flags override the file, which overrides the benchmark preset.  Outputs are
plain JSON/CSV with sorted keys and no timestamps, so identical invocations
give identical bytes.  Exit status is 0 on success, 2 on a usage error and
1 on a numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import pipelines as P
from .errors import NumericalError
from .eval import band_error, write_metrics, write_plot_data
from .flows import FlowModel, mean_nll
from .mhnet import InitStrategy, MHNetwork
from .mtl import LossWeights, MTLObjective
from .problems import BENCHMARKS, read_tasks, write_tasks
from .problems import generators as gen

log = logging.getLogger("mhpinn")

METHODS = ("finetune", "hmc", "laplace")
BASELINES = ("none", "scratch", "tl")
STAGES = ("mtl", "flow", "all")


class UsageError(Exception):
    pass


# configuration -----------------------------------------------------------------

def _overrides(args) -> dict:
    """Map command-line flags onto config sections (``None`` means not given)."""
    table = {
        "data": {"seed": "seed", "tasks": "tasks", "downstream": "downstream", "noisy": "noisy"},
        "mtl": {"iterations": "iterations", "lr": "lr", "init": "init", "widths": "widths"},
        "flow": {"kind": "flow_kind", "epochs": "epochs", "bijectors": "bijectors"},
        "infer": {"method": "method", "alpha": "alpha", "baseline": "baseline", "chains": "chains",
                  "iterations": "infer_iterations", "burn_in": "burn_in", "samples": "samples",
                  "step_size": "step_size", "leapfrog": "leapfrog",
                  "scratch_iterations": "scratch_iterations"},
    }
    out = {}
    for section, keys in table.items():
        for key, attr in keys.items():
            value = getattr(args, attr, None)
            if value is not None:
                out.setdefault(section, {})[key] = value
    return out


def _config(args) -> dict:
    try:
        cfg = P.effective_config(args.benchmark, args.config, _overrides(args))
    except (KeyError, ValueError, FileNotFoundError) as exc:
        raise UsageError(str(exc.args[0]) if exc.args else str(exc)) from exc
    _validate(cfg)
    return cfg


def _validate(cfg) -> None:
    d, m, f, i = cfg["data"], cfg["mtl"], cfg["flow"], cfg["infer"]
    checks = [
        (d["tasks"] >= 1, "--tasks must be at least 1"),
        (d["downstream"] >= 0, "--downstream must be non-negative"),
        (m["iterations"] >= 1 and i["iterations"] >= 1, "iteration counts must be positive"),
        (m["lr"] > 0 and f["lr"] > 0 and i["lr"] > 0, "learning rates must be positive"),
        (f["epochs"] >= 1 and f["bijectors"] >= 1, "flow epochs and bijectors must be positive"),
        (i["method"] in METHODS, f"--method must be one of {', '.join(METHODS)}"),
        (i["baseline"] in BASELINES, f"--baseline must be one of {', '.join(BASELINES)}"),
        (i["chains"] >= 1, "--chains must be at least 1"),
        (i["scratch_iterations"] >= 1, "--scratch-iterations must be positive"),
        (f["kind"] in ("maf", "iaf", "realnvp"), "flow kind must be maf, iaf or realnvp"),
    ]
    for ok, message in checks:
        if not ok:
            raise UsageError(message)
    try:
        InitStrategy.parse(m["init"])
        P._ints(m["widths"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _meta(cfg, command: str, **extra) -> dict:
    return {"command": command, "config": cfg, **extra}


def _out_dir(args, cfg, default: str) -> Path:
    path = Path(args.out) if args.out else Path("runs") / cfg["data"]["benchmark"] / default
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_tasks(args, cfg):
    if getattr(args, "data", None):
        path = Path(args.data)
        if not path.exists():
            raise UsageError(f"dataset {path} does not exist")
        tasks, meta = read_tasks(path)
        if meta.get("config", {}).get("data", {}).get("benchmark", cfg["data"]["benchmark"]) \
                != cfg["data"]["benchmark"]:
            raise UsageError(f"dataset {path} was generated for another benchmark")
        return tasks
    return P.generate(cfg)


# commands ----------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args)
    bench = P.benchmark_of(cfg)
    if args.downstream is not None:
        tasks = [P.generate_downstream(cfg)]
        kind = "downstream"
        default = f"{bench.name}-downstream{cfg['data']['downstream']}.jsonl"
    else:
        tasks = P.generate(cfg)
        kind = "tasks"
        default = f"{bench.name}-tasks.jsonl"
    path = Path(args.out or default)
    counts = {c: int(sum(t.counts()[c] for t in tasks)) for c in "fbu"}
    write_tasks(path, tasks, _meta(cfg, "generate", kind=kind, n_tasks=len(tasks), points=counts))
    per_task = {c: sorted({t.counts()[c] for t in tasks}) for c in "fbu"}
    print(f"{bench.name}: {len(tasks)} {kind} record(s), seed {cfg['data']['seed']}, "
          f"points per task f={per_task['f']} b={per_task['b']} u={per_task['u']} -> {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg, "model")
    net_path = out / "net.json"
    if args.stage in ("mtl", "all"):
        tasks = _load_tasks(args, cfg)
        cfg["data"]["tasks"] = len(tasks)
        net, trace = P.fit_mtl(cfg, tasks)
        net.meta["config"] = cfg
        net.save(net_path)
        trace.write_csv(out / "mtl_trace.csv")
        print(f"mtl: {len(tasks)} tasks, final loss {trace.totals[-1]:.6g} -> {net_path}")
    if args.stage in ("flow", "all"):
        if not net_path.exists():
            raise UsageError(f"stage-1 checkpoint {net_path} is missing; run --stage mtl first")
        net = MHNetwork.load(net_path)
        flow, nll = P.fit_flow(cfg, net)
        flow.meta["config"] = cfg
        flow.save(out / "flow.json")
        with (out / "flow_trace.csv").open("w") as fh:
            fh.write("epoch,nll\n")
            fh.writelines(f"{e},{v!r}\n" for e, v in enumerate(map(float, nll)))
        print(f"flow: {flow.kind}, D={flow.dim}, final NLL {nll[-1]:.6g} -> {out / 'flow.json'}")
    write_metrics(out / f"train_{args.stage}_meta.json", _meta(cfg, "train", stage=args.stage))
    return 0


def _prediction_csv(path, task, pred) -> None:
    write_plot_data(path, P._ref_grid(task), pred["mean"], pred["lower"], pred["upper"])


def cmd_infer(args) -> int:
    cfg = _config(args)
    bench = P.benchmark_of(cfg)
    model = Path(args.model) if args.model else Path("runs") / bench.name / "model"
    if not args.baseline_only and not (model / "net.json").exists():
        raise UsageError(f"no checkpoint in {model}; run `mhpinn train` first")
    out = _out_dir(args, cfg, "infer")
    if args.task:
        tasks, _ = read_tasks(args.task)
        task = tasks[0]
    else:
        task = P.generate_downstream(cfg)
    inf = cfg["infer"]
    record = _meta(cfg, "infer", benchmark=bench.name, seed=cfg["data"]["seed"], task_id=task.task_id)
    if not args.baseline_only:
        net = MHNetwork.load(model / "net.json")
        need_flow = inf["method"] != "finetune" or inf["alpha"] != 0
        flow = None
        if need_flow:
            if not (model / "flow.json").exists():
                raise UsageError(f"no flow checkpoint in {model}; run `mhpinn train --stage flow`")
            flow = FlowModel.load(model / "flow.json")
        res = P.infer_ours(cfg, net, flow, task)
        record["ours"] = res["metrics"]
        _prediction_csv(out / "prediction.csv", task, res["prediction"])
        names = {n: net.config.head_size + j for j, n in enumerate(bench.unknown)}
        if inf["method"] == "hmc":
            for c, chain in enumerate(res["chains"]):
                chain.write_jsonl(out / f"posterior_chain{c}.jsonl", names)
        elif inf["method"] == "laplace":
            res["posterior"].write_jsonl(out / "posterior.jsonl", names)
        print(f"{inf['method']}: u error {res['metrics']['error_u_pct']:.4g}%"
              + "".join(f", {n} {res['metrics'][n + '_est']:.5g} (ref {res['metrics'][n + '_ref']:.5g})"
                        for n in bench.unknown))
    if inf["baseline"] != "none":
        if inf["baseline"] == "tl":
            base = P.infer_tl(cfg, MHNetwork.load(model / "net.json"), task)
        else:
            base = P.infer_scratch(cfg, task)
        record["baseline"] = {"name": inf["baseline"], **base["metrics"]}
        _prediction_csv(out / f"baseline_{inf['baseline']}.csv", task, base["prediction"])
        print(f"baseline {inf['baseline']}: u error {base['metrics']['error_u_pct']:.4g}%")
    write_metrics(out / "metrics.json", record)
    return 0


def cmd_study(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg, "study")
    inits = tuple(args.inits.split(",")) if args.inits else P.STUDY_INITS
    table = P.study_mtl(cfg, inits=inits, stl=not args.no_stl)
    write_metrics(out / "study.json", _meta(cfg, "study-mtl", **table))
    lines = ["method,sparse_mean,sparse_std,dense_mean,dense_std"]
    for name, row in table["rows"].items():
        lines.append(",".join([name] + [repr(row[k]) for k in
                                        ("sparse_mean", "sparse_std", "dense_mean", "dense_std")]))
    (out / "study.csv").write_text("\n".join(lines) + "\n")
    print(f"{'method':<12}{'sparse %':>22}{'dense %':>22}")
    for name, row in table["rows"].items():
        print(f"{name:<12}{row['sparse_mean']:>12.3f} +- {row['sparse_std']:<6.3f}"
              f"{row['dense_mean']:>12.3f} +- {row['dense_std']:<6.3f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    bench = P.benchmark_of(cfg)
    model = Path(args.model) if args.model else Path("runs") / bench.name / "model"
    if not (model / "net.json").exists():
        raise UsageError(f"no checkpoint in {model}")
    net = MHNetwork.load(model / "net.json")
    tasks = _load_tasks(args, cfg)
    if len(tasks) != net.n_heads:
        raise UsageError(f"checkpoint has {net.n_heads} heads but the dataset has {len(tasks)} tasks")
    m = cfg["mtl"]
    obj = MTLObjective(bench.problem, tasks, LossWeights(m["w_f"], m["w_b"], m["w_u"]), bench.unknown)
    per = obj.per_task(net.theta, net.heads, net.task_params)
    record = _meta(cfg, "eval", benchmark=bench.name, seed=cfg["data"]["seed"], n_tasks=len(tasks))
    record["task_loss"] = {c: {"mean": float(v.mean()), "max": float(v.max())} for c, v in per.items()}
    if bench.name == "fn-approx":
        err = P.mtl_task_errors(net, tasks)
        record["task_error_pct"] = {"mean": float(err.mean()), "max": float(err.max())}
    for name in bench.unknown:
        est = np.exp(np.asarray(net.task_params["log_" + name]))
        ref = np.array([t.params[name] for t in tasks])
        e = 100 * np.abs(est - ref) / np.abs(ref)
        record[f"{name}_error_pct"] = {"mean": float(e.mean()), "median": float(np.median(e))}
    if (model / "flow.json").exists():
        flow = FlowModel.load(model / "flow.json")
        record["flow_nll"] = mean_nll(flow, P.head_samples(net, bench.unknown))
        if bench.name == "fn-approx":
            x = gen.FN_GRID
            band = P.flow_function_band(net, flow, x, 1000, cfg["data"]["seed"])
            mu, sd = gen.family_moments(x)
            lo, hi = mu - 2 * sd, mu + 2 * sd
            record["band_error"] = band_error(band["lower"], band["upper"], lo, hi)
            write_plot_data(model / "flow_band.csv", x, band["mean"], band["lower"], band["upper"])
    path = Path(args.out) if args.out else model / "eval.json"
    write_metrics(path, record)
    summary = {k: v for k, v in record.items() if k not in ("config", "command")}
    print("\n".join(f"{k}: {v}" for k, v in summary.items()))
    return 0


# parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--benchmark", "-b", choices=BENCHMARKS, help="benchmark preset")
    common.add_argument("--config", help="INI file with [data] [mtl] [flow] [infer] sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    common.add_argument("--out", "-o", help="output file or directory")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(prog="mhpinn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="sample training or downstream tasks")
    g.add_argument("--tasks", type=int)
    g.add_argument("--downstream", type=int, help="write downstream task INDEX instead")
    g.add_argument("--noisy", action="store_true", default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="MTL stage, flow stage or both")
    t.add_argument("--stage", choices=STAGES, default="all")
    t.add_argument("--data", help="task file from `generate` (sampled from the config if absent)")
    t.add_argument("--tasks", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--init", help="head initialization: rn005, rn1 or gu")
    t.add_argument("--widths", help="hidden widths, e.g. 50,50,50")
    t.add_argument("--flow-kind", choices=("maf", "iaf", "realnvp"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--bijectors", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="few-shot inference on a downstream task")
    i.add_argument("--model", help="directory holding net.json and flow.json")
    i.add_argument("--task", help="downstream task file (sampled from the config if absent)")
    i.add_argument("--downstream", type=int)
    i.add_argument("--noisy", action="store_true", default=None)
    i.add_argument("--method")
    i.add_argument("--alpha", help="flow weight, or 'auto' to match the benchmark noise")
    i.add_argument("--baseline")
    i.add_argument("--baseline-only", action="store_true")
    i.add_argument("--chains", type=int)
    i.add_argument("--iterations", dest="infer_iterations", type=int)
    i.add_argument("--burn-in", type=int)
    i.add_argument("--samples", type=int)
    i.add_argument("--step-size", type=float)
    i.add_argument("--leapfrog", type=int)
    i.add_argument("--init", help="head initialization of the scratch baseline")
    i.add_argument("--widths", help="hidden widths of the scratch baseline")
    i.add_argument("--scratch-iterations", type=int)
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("study-mtl", parents=[common], help="sparse/dense MTL vs STL study")
    s.add_argument("--tasks", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--inits", help="comma list of head initializations")
    s.add_argument("--widths", help="hidden widths, e.g. 50,50,50")
    s.add_argument("--no-stl", action="store_true")
    s.set_defaults(func=cmd_study)

    e = sub.add_parser("eval", parents=[common], help="metrics of a trained model")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--tasks", type=int)
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "study-mtl" and args.benchmark is None:
        args.benchmark = "fn-approx"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except NumericalError as exc:
        print(f"mhpinn: numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
