import math

import numpy as np
import pytest

from mhpinn.errors import ConvergenceError, NumericalError, SamplingError
from mhpinn.flows import FlowModel
from mhpinn.infer import (FewShotProblem, HMCConfig, PosteriorResult, finetune, hmc_sample,
                          laplace, laplace_at, leapfrog, matched_alpha, posterior_mode, predictive,
                          push_through, refined_hessian)
from mhpinn.mhnet import BodyConfig, MHNetwork
from mhpinn.mtl import AdamConfig
from mhpinn.problems import BENCHMARKS, FunctionRegression, Measurements, TaskDataset, get_benchmark
from mhpinn.rng import make_rng

FN = FunctionRegression()


def std_normal(x):
    return -0.5 * float(x @ x), -x


def reg_task(x, y):
    x = np.asarray(x, float)
    return TaskDataset(0, f=Measurements(x[:, None], np.asarray(y, float)))


def gaussian_flow(mean, std):
    flow = FlowModel.create(len(mean), n_bijectors=1, widths=(4, 4))
    flow.mean = np.asarray(mean, float)
    flow.std = np.asarray(std, float)
    return flow


def design(net, x):
    return np.c_[np.ones(len(x)), net.features(np.asarray(x)[:, None])]


# finetune -------------------------------------------------------------------------

def test_alpha_zero_is_least_squares():
    net = MHNetwork.create(BodyConfig(1, (3,)), 1, seed=2)
    # spread-out units keep the normal equations well conditioned
    net.weights[0][:] = [[1.5, -2.0, 3.0]]
    net.biases[0][:] = [0.5, 0.0, -1.0]
    x = np.linspace(-1, 1, 12)
    y = np.sin(2 * x) + x
    fs = FewShotProblem(net, FN, reg_task(x, y), alpha=0.0)
    res = finetune(fs, init=np.zeros(4), refine=True)
    A = design(net, x)
    exact = np.linalg.solve(A.T @ A, A.T @ y)
    assert np.max(np.abs(res.v - exact)) < 1e-6
    assert res.loss == pytest.approx(np.mean((A @ exact - y) ** 2), abs=1e-12)


def test_large_alpha_finds_flow_mode():
    rng = make_rng(3)
    net = MHNetwork.create(BodyConfig(1, (2,)), 1, seed=1)
    flow = FlowModel.create(3, n_bijectors=2, widths=(8, 8))
    for b in flow.bijectors:
        for p in b.params:
            p += 0.3 * rng.standard_normal(p.shape)
    fs = FewShotProblem(net, FN, reg_task([0.0], [1.0]), flow, alpha=1e6)
    res = finetune(fs, adam=AdamConfig(lr=1e-2, iterations=3000))
    samples = flow.sample(100, make_rng(4))
    assert flow.log_prob(res.v) >= flow.log_prob(samples).max()


def test_finetune_divergence_aborts():
    net = MHNetwork.create(BodyConfig(1, (3,)), 1, seed=2)
    fs = FewShotProblem(net, FN, reg_task([0.0, 0.5], [1.0, 2.0]), alpha=0.0)
    with pytest.raises(ConvergenceError):
        finetune(fs, adam=AdamConfig(lr=1e5, iterations=50))


def test_problem_validation():
    net = MHNetwork.create(BodyConfig(1, (3,)), 1, seed=2)
    d = reg_task([0.0], [1.0])
    with pytest.raises(ValueError):
        FewShotProblem(net, FN, d, alpha=-1.0)
    with pytest.raises(ValueError):
        FewShotProblem(net, FN, d, alpha=1.0)
    with pytest.raises(ValueError):
        FewShotProblem(net, FN, d, FlowModel.create(3), alpha=1.0)
    with pytest.raises(ValueError):
        FewShotProblem(net, FN, d, alpha=0.0, noise={"f": 0.0})


# log posterior ----------------------------------------------------------------------

def test_single_observation_gaussian_term():
    net = MHNetwork.create(BodyConfig(1, (3,)), 1, seed=2)
    fs = FewShotProblem(net, FN, reg_task([0.3], [0.7]), alpha=0.0, noise={"f": 0.2})
    h = make_rng(5).normal(size=4)
    u = float(net.features(np.array([[0.3]]))[0] @ h[1:] + h[0])
    expected = -(u - 0.7) ** 2 / (2 * 0.04) - math.log(0.2 * math.sqrt(2 * math.pi))
    assert fs.log_posterior(h)[0] == pytest.approx(expected, rel=1e-13)


def test_posterior_minus_likelihood_is_flow_density():
    net = MHNetwork.create(BodyConfig(1, (3,)), 1, seed=2)
    flow = gaussian_flow([0.1, 0.2, 0.3, 0.4], [1.0, 2.0, 0.5, 1.0])
    fs = FewShotProblem(net, FN, reg_task([0.3], [0.7]), flow, noise={"f": 0.2})
    h = make_rng(6).normal(size=4)
    assert fs.log_posterior(h)[0] - fs.log_likelihood(h)[0] == pytest.approx(flow.log_prob(h))


def test_missing_noise_scale():
    net = MHNetwork.create(BodyConfig(1, (3,)), 1, seed=2)
    fs = FewShotProblem(net, FN, reg_task([0.3], [0.7]), alpha=0.0)
    with pytest.raises(ValueError, match="noise"):
        fs.log_posterior(np.zeros(4))


@pytest.mark.parametrize("name", sorted(BENCHMARKS))
def test_log_posterior_gradient_matches_fd(name):
    bench = get_benchmark(name)
    task = bench.downstream(0, True, 0)
    net = MHNetwork.create(BodyConfig(bench.problem.input_dim, (8, 8)), 1, seed=3)
    dim = net.config.head_size + len(bench.unknown)
    rng = make_rng(7)
    flow = FlowModel.create(dim, n_bijectors=2, widths=(8, 8))
    for b in flow.bijectors:
        for p in b.params:
            p += 0.2 * rng.standard_normal(p.shape)
    fs = FewShotProblem(net, bench.problem, task, flow, noise=bench.noise, unknown=bench.unknown)
    v = 0.3 * rng.standard_normal(dim)
    _, g = fs.log_posterior(v)
    e = 1e-6
    num = np.array([(fs.log_posterior(v + e * u)[0] - fs.log_posterior(v - e * u)[0]) / (2 * e)
                    for u in np.eye(dim)])
    assert np.max(np.abs(g - num) / np.maximum(1.0, np.abs(num))) < 1e-4


def test_matched_alpha_single_channel():
    d = reg_task([0.0, 0.1, 0.2, 0.3], [0, 0, 0, 0])
    assert matched_alpha(d, {"f": 0.1}) == pytest.approx(2 * 0.01 / 4)
    with pytest.raises(ValueError):
        matched_alpha(d, {"u": 0.1})


def test_matched_alpha_finetune_equals_posterior_mode():
    net = MHNetwork.create(BodyConfig(1, (1,)), 1, seed=5)
    flow = gaussian_flow([0.5, -0.5], [0.7, 1.3])
    d = reg_task([-0.5, 0.2, 0.8], [0.3, 1.0, 1.4])
    noise = {"f": 0.3}
    a = matched_alpha(d, noise)
    ft = finetune(FewShotProblem(net, FN, d, flow, alpha=a), refine=True)
    mode = posterior_mode(FewShotProblem(net, FN, d, flow, noise=noise))
    assert np.max(np.abs(ft.v - mode)) < 1e-6


# HMC ----------------------------------------------------------------------------------

def test_hmc_standard_normal_moments():
    cfg = HMCConfig(step_size=0.1, n_leapfrog=30, burn_in=1000, n_samples=4000)
    res = hmc_sample(std_normal, np.zeros(6), cfg, make_rng(8))
    se = 1 / math.sqrt(len(res.samples))
    assert np.all(np.abs(res.samples.mean(0)) < 5 * se)
    assert np.all(np.abs(res.samples.var(0) - 1) < 0.1)
    assert 0.5 <= res.acceptance <= 0.8


def test_hmc_chains_agree():
    cfg = HMCConfig(burn_in=500, n_samples=2000)
    a = hmc_sample(std_normal, np.zeros(3), cfg, make_rng(9, 0)).samples
    b = hmc_sample(std_normal, np.zeros(3), cfg, make_rng(9, 1)).samples
    # batch-means standard errors account for autocorrelation
    se2 = sum(s.reshape(20, -1, 3).mean(1).var(0, ddof=1) / 20 for s in (a, b))
    assert np.all(np.abs(a.mean(0) - b.mean(0)) < 3 * np.sqrt(se2))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_hmc_seeded():
    cfg = HMCConfig(burn_in=50, n_samples=50)
    a = hmc_sample(std_normal, np.zeros(2), cfg, make_rng(1))
    b = hmc_sample(std_normal, np.zeros(2), cfg, make_rng(1))
    assert np.array_equal(a.samples, b.samples)


def test_leapfrog_energy_error_is_second_order():
    x0, p0 = np.array([1.0, -0.5]), np.array([0.3, 0.8])

    def dH(eps):
        x, p, lp, _ = leapfrog(std_normal, x0, p0, eps, int(round(1.0 / eps)))
        return abs((-lp + 0.5 * p @ p) - (0.5 * x0 @ x0 + 0.5 * p0 @ p0))

    ratio = dH(0.02) / dH(0.01)
    assert 3.5 < ratio < 4.5


def test_leapfrog_is_reversible():
    rng = make_rng(10)
    A = rng.normal(size=(4, 4))
    P = A @ A.T + np.eye(4)
    logp = lambda x: (-0.5 * float(x @ P @ x), -P @ x)
    x0, p0 = rng.normal(size=4), rng.normal(size=4)
    x1, p1, _, _ = leapfrog(logp, x0, p0, 0.05, 40)
    x2, p2, _, _ = leapfrog(logp, x1, -p1, 0.05, 40)
    assert np.max(np.abs(x2 - x0)) < 1e-10 and np.max(np.abs(-p2 - p0)) < 1e-10


def test_all_rejected_chain_is_an_error():
    cfg = HMCConfig(step_size=50.0, n_leapfrog=5, burn_in=0, n_samples=20, adapt=False)
    with pytest.raises(SamplingError):
        hmc_sample(lambda x: (-1e6 * float(x @ x), -2e6 * x), np.zeros(2), cfg, make_rng(0))


def test_acceptance_outside_window_warns():
    cfg = HMCConfig(step_size=1e-3, n_leapfrog=2, burn_in=0, n_samples=50, adapt=False)
    with pytest.warns(RuntimeWarning, match="acceptance"):
        hmc_sample(std_normal, np.zeros(2), cfg, make_rng(0))


def test_hmc_config_validation():
    with pytest.raises(ValueError):
        HMCConfig(step_size=0)
    with pytest.raises(ValueError):
        HMCConfig(jitter=1.5)


# Laplace -------------------------------------------------------------------------------

def test_laplace_exact_on_linear_gaussian():
    net = MHNetwork.create(BodyConfig(1, (3,)), 1, seed=4)
    x = np.linspace(-1, 1, 6)
    y = np.cos(x)
    sigma = 0.2
    m, s = np.array([0.1, -0.2, 0.3, 0.0]), np.array([1.0, 0.5, 2.0, 1.5])
    fs = FewShotProblem(net, FN, reg_task(x, y), gaussian_flow(m, s), noise={"f": sigma})
    A = design(net, x)
    prec = A.T @ A / sigma ** 2 + np.diag(1 / s ** 2)
    cov = np.linalg.inv(prec)
    mean = cov @ (A.T @ y / sigma ** 2 + m / s ** 2)
    res = laplace(fs)
    assert np.max(np.abs(res.mode - mean)) < 1e-6
    assert np.max(np.abs(res.cov - cov)) < 1e-6 * np.abs(cov).max()
    assert np.array_equal(res.cov, res.cov.T)
    assert np.linalg.eigvalsh(res.cov).min() > -1e-10


def test_laplace_non_pd_reports_smallest_eigenvalue():
    logp = lambda x: (float(x @ x) - 3 * x[0] ** 2, 2 * x - np.array([6 * x[0], 0.0]))
    with pytest.raises(NumericalError, match="smallest eigenvalue -2"):
        laplace_at(logp, np.zeros(2))


def test_refined_hessian_matches_quadratic():
    P = np.array([[2.0, 0.5], [0.5, 1.0]])
    Hm = refined_hessian(lambda x: -P @ x, np.array([0.3, -2.0]))
    assert np.allclose(Hm, -P, atol=1e-8)


def test_laplace_draws_need_rng():
    r = PosteriorResult("laplace", mode=np.zeros(2), cov=np.eye(2))
    with pytest.raises(ValueError):
        r.draws(10)
    d = r.draws(20_000, make_rng(1))
    assert np.allclose(np.cov(d.T), np.eye(2), atol=0.05)


# predictive ------------------------------------------------------------------------------

def test_predictive_identical_samples_zero_band():
    net = MHNetwork.create(BodyConfig(1, (3,)), 1, seed=4)
    fs = FewShotProblem(net, FN, reg_task([0.0], [0.0]), alpha=0.0)
    V = np.tile(make_rng(2).normal(size=4), (5, 1))
    out = predictive(fs, V, np.linspace(-1, 1, 7)[:, None])
    assert np.all(out["u"]["std"] == 0) and np.all(out["f"]["band"] == 0)


def test_predictive_two_point_moments():
    net = MHNetwork.create(BodyConfig(1, (3,)), 1, seed=4)
    fs = FewShotProblem(net, FN, reg_task([0.0], [0.0]), alpha=0.0)
    V = np.zeros((2, 4))
    V[1, 0] = 2.0
    out = predictive(fs, V, np.linspace(-1, 1, 7)[:, None])
    assert np.allclose(out["u"]["mean"], 1) and np.allclose(out["u"]["std"], 1)
    assert np.allclose(out["u"]["band"], 2)
    with pytest.raises(ValueError):
        predictive(fs, V[:1], np.zeros((1, 1)))


def test_push_through_matches_network():
    bench = get_benchmark("pendulum-inverse")
    net = MHNetwork.create(BodyConfig(1, (6,)), 1, seed=1)
    fs = FewShotProblem(net, bench.problem, bench.downstream(0, False, 0), alpha=0.0,
                        unknown=bench.unknown)
    v = make_rng(3).normal(size=8)
    t = np.linspace(0, 1, 5)[:, None]
    u, f = push_through(fs, v[None], t)
    from mhpinn.problems import residual
    assert np.allclose(f[0], residual(bench.problem, net.theta, v[:7], {"lam": math.exp(v[7])}, t))
    assert np.allclose(u[0], t[:, 0] ** 2 * net.predict(t, 0) * 0 + t[:, 0] ** 2 *
                       (net.features(t) @ v[1:7] + v[0]))
