"""Few-shot inference on a new task with the body frozen.

The unknowns are a head ``h`` and, when an operator parameter is inferred,
its logarithm: ``v = [h, log lam]``.  The learned flow density over ``v``
acts as a regularizer (``finetune``) or as the prior of a Bayesian posterior
(``hmc``, ``laplace``).
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.optimize

from .autodiff import tape as ad
from .errors import ConvergenceError, NonFiniteError, NumericalError, SamplingError
from .flows import FlowModel
from .mhnet import MHNetwork, body_jet
from .mtl import Adam, AdamConfig, LossWeights, MTLObjective
from .problems.dataset import TaskDataset
from .problems.operators import Problem, constrain

log = logging.getLogger(__name__)

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class FewShotProblem:
    """Frozen body, sparse data of one task, and an optional flow prior.

    ``noise`` maps channel names to the likelihood scale; ``l2`` adds a
    ridge penalty on the head to the deterministic objective.
    """

    def __init__(self, net: MHNetwork, problem: Problem, data: TaskDataset,
                 flow: FlowModel | None = None, alpha: float = 1.0, noise=None, unknown=(),
                 params=None, weights: LossWeights | None = None, l2: float = 0.0):
        if alpha < 0:
            raise ValueError("alpha must be non-negative")
        if alpha > 0 and flow is None:
            raise ValueError("alpha > 0 needs a flow")
        self.theta = [(w.copy(), b.copy()) for w, b in net.theta]
        self.problem = problem
        self.data = data
        self.flow = flow
        self.alpha = float(alpha)
        self.unknown = tuple(unknown)
        self.head_size = net.config.head_size
        self.noise = {ch: float(s) for ch, s in (noise or {}).items()}
        for ch, s in self.noise.items():
            if not s > 0:
                raise ValueError(f"noise scale for channel {ch!r} must be positive")
        self.l2 = l2
        self.obj = MTLObjective(problem, [data], weights, unknown=self.unknown, params=params)
        for chan in self.obj.channels:
            chan.features(self.theta, frozen=True)
        if flow is not None and flow.dim != self.dim:
            raise ValueError(f"flow dimension {flow.dim} does not match {self.dim} unknowns")

    @property
    def dim(self) -> int:
        return self.head_size + len(self.unknown)

    def split(self, v):
        hs = self.head_size
        heads = ad.reshape(v[:hs], (1, hs))
        tp = {"log_" + n: v[hs + i:hs + i + 1] for i, n in enumerate(self.unknown)}
        return heads, tp

    def head(self, v) -> np.ndarray:
        return np.asarray(v)[:self.head_size]

    def lam(self, v) -> dict:
        v = np.asarray(v)
        return {n: float(np.exp(v[self.head_size + i])) for i, n in enumerate(self.unknown)}

    def _sums(self, leaf):
        """Per-channel sum of squared residuals and entry counts."""
        heads, tp = self.split(leaf)
        preds = self.obj.predictions(self.theta, heads, tp, frozen=True)
        out = {}
        for chan in self.obj.channels:
            r, _ = chan.residual(preds[chan.name])
            out[chan.name] = (ad.tsum(r * r), len(chan.targets))
        return out

    def _flow_term(self, v):
        if self.flow is None:
            return 0.0, np.zeros(self.dim)
        return self.flow.log_prob_grad(v)

    def data_loss(self, v) -> tuple[float, np.ndarray]:
        """Weighted per-channel mean squared misfit and its gradient."""
        leaf = ad.param(np.asarray(v, dtype=np.float64))
        total = None
        for name, (sq, n) in self._sums(leaf).items():
            term = sq * (getattr(self.obj.weights, name) / n)
            total = term if total is None else total + term
        return _finish(leaf, total)

    def objective(self, v) -> tuple[float, np.ndarray]:
        """``data_loss - alpha log p(v) + l2 |h|^2``."""
        val, g = self.data_loss(v)
        if self.alpha > 0:
            lp, glp = self._flow_term(v)
            val -= self.alpha * lp
            g = g - self.alpha * glp
        if self.l2 > 0:
            h = np.asarray(v)[:self.head_size]
            val += self.l2 * float(h @ h)
            g = g.copy()
            g[:self.head_size] += 2 * self.l2 * h
        return val, g

    def log_likelihood(self, v) -> tuple[float, np.ndarray]:
        leaf = ad.param(np.asarray(v, dtype=np.float64))
        total = None
        const = 0.0
        for name, (sq, n) in self._sums(leaf).items():
            if name not in self.noise:
                raise ValueError(f"no noise scale configured for channel {name!r}")
            s = self.noise[name]
            term = sq * (-0.5 / (s * s))
            const -= n * (math.log(s) + LOG_SQRT_2PI)
            total = term if total is None else total + term
        val, g = _finish(leaf, total)
        return val + const, g

    def log_posterior(self, v) -> tuple[float, np.ndarray]:
        """Gaussian log-likelihood plus the flow log-density (flat prior without a flow)."""
        ll, g = self.log_likelihood(v)
        lp, glp = self._flow_term(v)
        return ll + lp, g + glp

    def initial(self) -> np.ndarray:
        """Mean of the flow's training samples, or zero without a flow."""
        if self.flow is not None:
            return self.flow.mean.copy()
        return np.zeros(self.dim)


def matched_alpha(data: TaskDataset, noise, weights: LossWeights | None = None) -> float:
    """Regularization weight under which finetune minimizes a scaled negative log posterior.

    For one channel with ``N`` points, weight ``w`` and noise ``s`` this is
    ``2 s^2 w / N``.  Several channels are combined harmonically, which is
    exact when their ``N / (w s^2)`` agree.
    """
    weights = weights or LossWeights()
    total = 0.0
    for ch, n in data.counts().items():
        if n and ch in noise:
            total += n / (getattr(weights, ch) * float(noise[ch]) ** 2)
    if total == 0:
        raise ValueError("no channel has both data and a noise scale")
    return 2.0 / total


def _finish(leaf, total):
    if total is None:
        return 0.0, np.zeros(leaf.data.size)
    total.backward()
    g = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
    return total.item(), g


def log_posterior(problem: FewShotProblem, v) -> float:
    return problem.log_posterior(v)[0]


# deterministic fine-tuning -------------------------------------------------------

@dataclass
class FinetuneResult:
    v: np.ndarray
    loss: float
    trace: np.ndarray


def minimize(fun, x0, adam: AdamConfig, log_every: int = 100, limit: float = 1e6):
    """Adam on ``fun(x) -> (value, grad)``; aborts on divergence."""
    x = np.array(x0, dtype=np.float64)
    opt = Adam([x], adam)
    trace = []
    val = None
    for it in range(adam.iterations + 1):
        val, g = fun(x)
        if not np.isfinite(val) or not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite objective at iteration {it}")
        if it == 0:
            start = val
        if val > max(limit, 10 * abs(start)):
            raise ConvergenceError(f"objective diverged to {val:.3e} at iteration {it}")
        if it % log_every == 0 or it == adam.iterations:
            trace.append(val)
        if it == adam.iterations:
            break
        opt.step([g])
    return x, val, np.array(trace)


def finetune(problem: FewShotProblem, init=None, adam: AdamConfig | None = None,
             refine: bool = False) -> FinetuneResult:
    """Minimize the data misfit minus ``alpha`` times the flow log-density.

    Fixed-rate Adam hovers within about ``lr`` of the minimizer; ``refine``
    finishes with L-BFGS, kept only if it lowers the objective.
    """
    adam = adam or AdamConfig(lr=1e-2, iterations=5000)
    x0 = problem.initial() if init is None else np.asarray(init, dtype=np.float64)
    if x0.size != problem.dim:
        raise ValueError(f"initial vector has {x0.size} entries, expected {problem.dim}")
    v, val, trace = minimize(problem.objective, x0, adam)
    if refine:
        v, val = _lbfgs(problem.objective, v, val)
    return FinetuneResult(v, val, trace)


def _lbfgs(fun, x, val):
    def safe(v):
        try:
            return fun(v)
        except NonFiniteError:
            return np.inf, np.zeros_like(v)

    res = scipy.optimize.minimize(safe, x, jac=True, method="L-BFGS-B",
                                  options={"maxiter": 2000, "ftol": 1e-15, "gtol": 1e-12})
    if np.isfinite(res.fun) and res.fun <= val:
        return res.x, float(res.fun)
    return x, val


# posterior containers -------------------------------------------------------------

@dataclass
class PosteriorResult:
    """HMC draws or a Laplace (mode, covariance) pair."""

    kind: str
    samples: np.ndarray | None = None
    log_post: np.ndarray | None = None
    accepted: np.ndarray | None = None
    acceptance: float | None = None
    step_size: float | None = None
    step_trace: np.ndarray | None = None
    mode: np.ndarray | None = None
    cov: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def draws(self, n: int = 1000, rng=None) -> np.ndarray:
        if self.kind == "hmc":
            return self.samples
        if rng is None:
            raise ValueError("Laplace draws need an rng")
        L = np.linalg.cholesky(self.cov + 1e-14 * np.eye(self.cov.shape[0]))
        return self.mode + rng.standard_normal((n, self.mode.size)) @ L.T

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0) if self.kind == "hmc" else self.mode

    def write_jsonl(self, path, names=None) -> None:
        """One record per draw plus a trailing summary record."""
        with Path(path).open("w") as fh:
            if self.kind == "hmc":
                for i, (s, lp, acc) in enumerate(zip(self.samples, self.log_post, self.accepted)):
                    rec = {"draw": i, "v": [repr_float(x) for x in s], "log_post": repr_float(lp),
                           "accepted": bool(acc)}
                    if names:
                        rec.update({k: repr_float(np.exp(s[j])) for k, j in names.items()})
                    fh.write(json.dumps(rec) + "\n")
                summary = {"summary": True, "kind": "hmc", "acceptance": repr_float(self.acceptance),
                           "step_size": repr_float(self.step_size), "n_draws": int(len(self.samples))}
            else:
                summary = {"summary": True, "kind": "laplace",
                           "mode": [repr_float(x) for x in self.mode],
                           "cov": [[repr_float(x) for x in row] for row in self.cov]}
            summary.update(self.meta)
            fh.write(json.dumps(summary) + "\n")


def repr_float(x) -> float:
    return float(repr(float(x))) if np.isfinite(x) else float(x)


# HMC ------------------------------------------------------------------------------

@dataclass
class HMCConfig:
    step_size: float = 0.1
    n_leapfrog: int = 30
    burn_in: int = 1000
    n_samples: int = 1000
    target: float = 0.65
    adapt: bool = True
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    jitter: float = 0.2

    def __post_init__(self):
        if not self.step_size > 0 or self.n_leapfrog < 1 or self.n_samples < 1 or self.burn_in < 0 \
                or not 0 <= self.jitter < 1:
            raise ValueError("invalid HMC configuration")


def leapfrog(grad_logp, x, p, eps: float, n_steps: int, g=None):
    """Leapfrog integration for ``H = -log pi(x) + |p|^2 / 2``.

    ``grad_logp(x) -> (log pi, grad)``.  Returns ``(x, p, log pi, grad)`` at the end.
    """
    x = np.array(x, dtype=np.float64)
    p = np.array(p, dtype=np.float64)
    if g is None:
        _, g = grad_logp(x)
    lp = None
    p = p + 0.5 * eps * g
    for i in range(n_steps):
        x = x + eps * p
        lp, g = grad_logp(x)
        if i < n_steps - 1:
            p = p + eps * g
    p = p + 0.5 * eps * g
    return x, p, lp, g


def hmc_sample(logp_grad, x0, config: HMCConfig | None = None, rng=None) -> PosteriorResult:
    """Single HMC chain with identity mass and dual-averaging step-size adaptation."""
    cfg = config or HMCConfig()
    if rng is None:
        raise ValueError("hmc_sample needs an rng")
    x = np.array(x0, dtype=np.float64)
    lp, g = logp_grad(x)
    if not np.isfinite(lp):
        raise NonFiniteError("log-density is not finite at the starting point")
    eps = cfg.step_size
    mu = math.log(10 * cfg.step_size)
    h_bar, log_eps_bar = 0.0, 0.0
    draws, lps, flags, steps = [], [], [], []
    n_total = cfg.burn_in + cfg.n_samples
    for it in range(n_total):
        p0 = rng.standard_normal(x.size)
        eps_it = eps * (1.0 + cfg.jitter * (2.0 * rng.uniform() - 1.0)) if cfg.jitter else eps
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                x1, p1, lp1, g1 = leapfrog(logp_grad, x, p0, eps_it, cfg.n_leapfrog, g)
            log_ratio = (lp1 - 0.5 * p1 @ p1) - (lp - 0.5 * p0 @ p0)
        except (NonFiniteError, FloatingPointError, OverflowError):
            log_ratio = -np.inf
        if not np.isfinite(log_ratio):
            log_ratio = -np.inf
        accept_prob = math.exp(min(0.0, log_ratio))
        accepted = rng.uniform() < accept_prob
        if accepted:
            x, lp, g = x1, lp1, g1
        if it < cfg.burn_in:
            if cfg.adapt:
                m = it + 1
                w = 1.0 / (m + cfg.t0)
                h_bar = (1 - w) * h_bar + w * (cfg.target - accept_prob)
                log_eps = mu - math.sqrt(m) / cfg.gamma * h_bar
                eta = m ** -cfg.kappa
                log_eps_bar = eta * log_eps + (1 - eta) * log_eps_bar
                eps = math.exp(log_eps)
                if it == cfg.burn_in - 1:
                    eps = math.exp(log_eps_bar)
        else:
            draws.append(x.copy())
            lps.append(lp)
            flags.append(accepted)
        steps.append(eps)
    flags = np.array(flags, dtype=bool)
    rate = float(flags.mean())
    if not flags.any():
        raise SamplingError("every HMC proposal after burn-in was rejected")
    if not 0.5 <= rate <= 0.8:
        warnings.warn(f"HMC acceptance rate {rate:.3f} is outside [0.5, 0.8]", RuntimeWarning,
                      stacklevel=2)
    return PosteriorResult("hmc", np.array(draws), np.array(lps), flags, rate, eps,
                           np.array(steps))


def hmc(problem: FewShotProblem, config: HMCConfig | None = None, rng=None, init=None,
        map_adam: AdamConfig | None = None) -> PosteriorResult:
    """HMC on the few-shot posterior, started from its maximizer."""
    if init is None:
        init = posterior_mode(problem, map_adam)
    return hmc_sample(problem.log_posterior, init, config, rng)


# Laplace ----------------------------------------------------------------------------

def fd_hessian(grad, x, rel: float = 1e-4) -> np.ndarray:
    """Central differences of an exact gradient, step ``rel * (1 + |x_i|)``; symmetrized."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    Hm = np.empty((n, n))
    for i in range(n):
        h = rel * (1.0 + abs(x[i]))
        e = np.zeros(n)
        e[i] = h
        Hm[i] = (grad(x + e) - grad(x - e)) / (2 * h)
    return 0.5 * (Hm + Hm.T)


def refined_hessian(grad, x, rel: float = 1e-4, smallest: float = 1e-9,
                    tol: float = 1e-6) -> np.ndarray:
    """``fd_hessian`` with the step cut tenfold until two successive estimates agree.

    Learned flow densities can curve on scales far below ``1e-4``; a step
    that large then averages over the peak and can even flip the sign of
    eigenvalues.  Returns the finer of the first agreeing pair, or the
    smallest-step estimate.
    """
    prev = fd_hessian(grad, x, rel)
    while rel / 10 >= smallest * (1 - 1e-9):
        rel /= 10
        cur = fd_hessian(grad, x, rel)
        scale = max(np.abs(cur).max(), 1e-300)
        if np.abs(cur - prev).max() <= tol * scale:
            return cur
        prev = cur
    return prev


def posterior_mode(problem: FewShotProblem, adam: AdamConfig | None = None, init=None,
                   newton_steps: int = 5) -> np.ndarray:
    """Adam on the negative log-posterior, L-BFGS refinement, then Newton steps."""
    adam = adam or AdamConfig(lr=1e-2, iterations=5000)
    x0 = problem.initial() if init is None else np.asarray(init, dtype=np.float64)

    def neg(v):
        try:
            lp, g = problem.log_posterior(v)
        except NonFiniteError:
            return np.inf, np.zeros_like(v)
        return -lp, -g

    x, val, _ = minimize(neg, x0, adam, limit=np.inf)
    x, _ = _lbfgs(neg, x, val)
    return newton_polish(problem.log_posterior, x, newton_steps)


def newton_polish(logp_grad, x, steps: int = 5) -> np.ndarray:
    """Newton ascent on ``log pi`` with step halving; keeps ``x`` if no step helps."""
    x = np.array(x, dtype=np.float64)
    lp, g = logp_grad(x)
    for _ in range(steps):
        Hm = refined_hessian(lambda v: logp_grad(v)[1], x)
        try:
            np.linalg.cholesky(-Hm)
        except np.linalg.LinAlgError:
            break  # not locally concave: a Newton step would head for a saddle
        step = np.linalg.solve(-Hm, g)
        t = 1.0
        while t > 1e-4:
            try:
                lp1, g1 = logp_grad(x + t * step)
            except NonFiniteError:
                lp1 = -np.inf
            if lp1 >= lp:
                break
            t *= 0.5
        else:
            break
        x, lp, g = x + t * step, lp1, g1
        if np.abs(t * step).max() < 1e-12:
            break
    return x


def laplace_at(logp_grad, mode) -> PosteriorResult:
    Hm = refined_hessian(lambda v: logp_grad(v)[1], mode)
    A = -Hm
    eig = np.linalg.eigvalsh(A)
    if eig.min() <= 0:
        raise NumericalError(f"negative log-posterior Hessian is not positive definite "
                             f"(smallest eigenvalue {eig.min():.3e})")
    cov = np.linalg.inv(A)
    cov = 0.5 * (cov + cov.T)
    return PosteriorResult("laplace", mode=np.asarray(mode, dtype=np.float64), cov=cov,
                           meta={"min_precision_eigenvalue": float(eig.min())})


def laplace(problem: FewShotProblem, adam: AdamConfig | None = None, init=None) -> PosteriorResult:
    mode = posterior_mode(problem, adam, init)
    return laplace_at(problem.log_posterior, mode)


# predictive -----------------------------------------------------------------------------

def push_through(problem: FewShotProblem, V, X):
    """``u`` and ``F[u]`` at rows of ``X`` for each row of ``V``; arrays ``(n_draws, n_points)``."""
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    pb = problem.problem
    feats = body_jet(problem.theta, X, first=pb.first, second=pb.second)
    H = V[:, :problem.head_size]
    raw = {k: phi @ H[:, 1:].T + (H[:, 0] if k == () else 0.0) for k, phi in feats.items()}
    g = pb.constraint(X)
    u = raw if g is None else constrain({k: v[:, None] for k, v in g.items()}, raw)
    params = dict(problem.obj.params)
    for i, name in enumerate(problem.unknown):
        params[name] = np.exp(V[:, problem.head_size + i])[None, :]
    f = pb.operator(u, X, params)
    return u[()].T, np.asarray(f).T


def predictive(problem: FewShotProblem, result, X, n_draws: int = 1000, rng=None) -> dict:
    """Pointwise mean, std and ``2 std`` band of ``u`` and ``f`` under the posterior."""
    if isinstance(result, PosteriorResult):
        V = result.draws(n_draws, rng)
    else:
        V = np.atleast_2d(result)
    if V.shape[0] < 2:
        raise ValueError("predictive statistics need at least two draws")
    U, F = push_through(problem, V, X)
    out = {}
    for name, A in (("u", U), ("f", F)):
        # centring on one draw keeps identical draws at exactly zero spread
        D = A - A[0]
        mean = A[0] + D.mean(axis=0)
        std = D.std(axis=0)
        out[name] = {"mean": mean, "std": std, "band": 2 * std}
    return out
