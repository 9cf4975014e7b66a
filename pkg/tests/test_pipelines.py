import numpy as np
import pytest

from mhpinn import pipelines as P
from mhpinn.mhnet import BodyConfig, MHNetwork


def tiny(bench, **extra):
    over = {"data": {"tasks": 3, "seed": 2}, "mtl": {"iterations": 20, "widths": "6,6"},
            "flow": {"epochs": 2, "bijectors": 2, "hidden": "8,8"},
            "infer": {"iterations": 20, "scratch_iterations": 20}}
    for k, v in extra.items():
        over.setdefault(k, {}).update(v)
    return P.effective_config(bench, None, over)


def test_study_split_is_half_sparse():
    full, train, sparse = P.study_tasks(0, 6)
    assert sparse.tolist() == [True, False] * 3
    assert [t.counts()["f"] for t in train] == [10, 40] * 3
    assert all(t.counts()["f"] == 40 for t in full)
    sub = train[0].f.x[:, 0]
    assert np.all(np.isin(sub, full[0].f.x[:, 0])) and np.all(np.diff(sub) > 0)


def test_head_samples_append_log_lambda():
    net = MHNetwork.create(BodyConfig(1, (4,)), 3, seed=0)
    net.task_params["log_lam"] = np.log([1.0, 2.0, 3.0])
    X = P.head_samples(net, ("lam",))
    assert X.shape == (3, 6) and np.allclose(np.exp(X[:, -1]), [1, 2, 3])


def test_resolve_alpha():
    cfg = tiny("fn-approx", infer={"alpha": "auto"})
    task = P.generate_downstream(cfg)
    assert P.resolve_alpha(cfg, task) == pytest.approx(2 * 0.2 ** 2 / 4)
    cfg["infer"]["alpha"] = 0.3
    assert P.resolve_alpha(cfg, task) == 0.3


@pytest.mark.parametrize("bench", ["fn-approx", "pendulum-inverse"])
def test_pipeline_end_to_end_is_deterministic(bench):
    def once():
        cfg = tiny(bench)
        tasks = P.generate(cfg)
        net, trace = P.fit_mtl(cfg, tasks)
        flow, nll = P.fit_flow(cfg, net)
        task = P.generate_downstream(cfg)
        ours = P.infer_ours(cfg, net, flow, task)
        tl = P.infer_tl(cfg, net, task)
        return trace.totals, nll, ours["metrics"], tl["metrics"]

    a, b = once(), once()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert a[2] == b[2] and a[3] == b[3]
    if bench == "pendulum-inverse":
        assert {"lam_est", "lam_ref", "lam_err_pct"} <= set(a[2])


def test_unknown_method():
    cfg = tiny("fn-approx")
    net, _ = P.fit_mtl(cfg, P.generate(cfg))
    with pytest.raises(ValueError):
        P.infer_ours(cfg, net, None, P.generate_downstream(cfg), method="vi")


def test_flow_band_shape():
    cfg = tiny("fn-approx")
    net, _ = P.fit_mtl(cfg, P.generate(cfg))
    flow, _ = P.fit_flow(cfg, net)
    band = P.flow_function_band(net, flow, np.linspace(-1, 1, 5), 50, 0)
    assert band["mean"].shape == (5,) and np.all(band["upper"] >= band["lower"])


def test_mtl_task_errors_need_solution_data():
    cfg = tiny("pendulum")
    tasks = P.generate(cfg)
    net, _ = P.fit_mtl(cfg, tasks)
    assert P.mtl_task_errors(net, tasks).shape == (3,)
