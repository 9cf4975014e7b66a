"""Multi-task physics-informed training of a multi-head network.

The loss is the mean over tasks of the per-task PINN loss

    L_k = w_f mean_i |F[u_k](x_i) - f_i|^2 + w_b mean_i |B[u_k](x_i) - b_i|^2
          + w_u mean_i |u_k(x_i) - u_i|^2

Points shared by every task are evaluated once: the body runs on the
distinct points of each channel and all heads are applied with one matmul.
Channels whose points differ across tasks fall back to a gathered layout.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import tape as ad
from .errors import NonFiniteError
from .mhnet import BodyConfig, InitStrategy, MHNetwork, body_jet
from .problems.dataset import CHANNELS, TaskDataset
from .problems.operators import Problem, constrain
from .rng import make_rng

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    f: float = 1.0
    b: float = 1.0
    u: float = 1.0

    def __post_init__(self):
        if min(self.f, self.b, self.u) < 0:
            raise ValueError("loss weights must be non-negative")

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(self.f * c, self.b * c, self.u * c)


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 10_000

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


class Adam:
    """Adam with bias correction, updating a list of arrays in place."""

    def __init__(self, params: list, config: AdamConfig):
        self.params = params
        self.cfg = config
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def direction(self, grads) -> list:
        """Update that the next ``step`` would apply, without applying it."""
        c = self.cfg
        t = self.t + 1
        out = []
        for m, v, g in zip(self.m, self.v, grads):
            m1 = c.beta1 * m + (1 - c.beta1) * g
            v1 = c.beta2 * v + (1 - c.beta2) * g * g
            mh = m1 / (1 - c.beta1 ** t)
            vh = v1 / (1 - c.beta2 ** t)
            out.append(-c.lr * mh / (np.sqrt(vh) + c.eps))
        return out

    def step(self, grads) -> None:
        c = self.cfg
        self.t += 1
        b1t = 1 - c.beta1 ** self.t
        b2t = 1 - c.beta2 ** self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p -= c.lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)


class _Channel:
    """Measurements of one channel across all tasks, laid out for evaluation."""

    def __init__(self, name, problem: Problem, datasets, weight: float, n_tasks: int,
                 layout: str = "auto"):
        self.name = name
        self.weight = weight
        if name == "f":
            self.first, self.second = problem.first, problem.second
        else:
            self.first, self.second = (), ()
        present = [(k, d.channel(name)) for k, d in enumerate(datasets) if d.channel(name) is not None]
        all_x = np.concatenate([m.x for _, m in present])
        self.X, inverse = np.unique(all_x, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        n_entries = len(all_x)
        if layout not in ("auto", "dense", "scattered"):
            raise ValueError(f"unknown layout {layout!r}")
        self.tidx = np.concatenate([np.full(len(m), k) for k, m in present])
        self.pidx = inverse
        # a repeated point within one task needs its own entry
        pairs = self.pidx * n_tasks + self.tidx
        unique_pairs = np.unique(pairs).size == pairs.size
        if layout == "auto":
            self.dense = unique_pairs and self.X.shape[0] * n_tasks <= 4 * n_entries
        else:
            self.dense = layout == "dense"
            if self.dense and not unique_pairs:
                raise ValueError("dense layout needs distinct points within each task")
        self.targets = np.concatenate([m.values for _, m in present])
        counts = np.bincount(self.tidx, minlength=n_tasks).astype(np.float64)
        self.entry_w = weight / (counts[self.tidx] * n_tasks)
        self.n_tasks = n_tasks
        g = problem.constraint(self.X)
        if self.dense:
            shape = (self.X.shape[0], n_tasks)
            self.T = np.zeros(shape)
            self.W = np.zeros(shape)
            self.P = np.zeros(shape)
            self.T[self.pidx, self.tidx] = self.targets
            self.W[self.pidx, self.tidx] = self.entry_w
            self.P[self.pidx, self.tidx] = 1.0
            self.g = None if g is None else {k: v[:, None] for k, v in g.items()}
        else:
            self.S_p = ad.scatter_matrix(self.pidx, self.X.shape[0])
            self.S_t = ad.scatter_matrix(self.tidx, n_tasks)
            self.g = None if g is None else {k: v[self.pidx] for k, v in g.items()}
        self._frozen = None

    def features(self, theta, frozen=False):
        if frozen and self._frozen is not None:
            return self._frozen
        feats = body_jet(theta, self.X, first=self.first, second=self.second)
        if frozen:
            self._frozen = feats
        return feats

    def raw_jet(self, feats, heads):
        """Unconstrained network outputs for every (point, task) entry."""
        hw = heads[:, 1:]
        h0 = heads[:, 0]
        out = {}
        for key, phi in feats.items():
            if self.dense:
                r = phi @ ad.transpose(hw)
                out[key] = r + h0 if key == () else r
            else:
                rows = ad.take_rows(phi, self.pidx, self.S_p) * ad.take_rows(hw, self.tidx, self.S_t)
                r = ad.tsum(rows, axis=1)
                out[key] = r + ad.take_rows(h0, self.tidx, self.S_t) if key == () else r
        return out

    def spread(self, values):
        """Per-task array ``(M,)`` broadcast to this channel's layout."""
        if self.dense:
            return ad.reshape(values, (1, -1))
        return ad.take_rows(values, self.tidx, self.S_t)

    def residual(self, pred):
        """``pred - target`` and a presence mask (``None`` when every entry is real)."""
        if self.dense:
            return (pred - self.T) * self.P, self.P
        return pred - self.targets, None

    def squared_error(self, pred):
        """Weighted squared residuals, same layout as ``pred``."""
        if self.dense:
            r = pred - self.T
            return self.W * r * r
        r = pred - self.targets
        return self.entry_w * r * r

    def per_task(self, sq: np.ndarray) -> np.ndarray:
        if self.dense:
            return sq.sum(axis=0)
        return np.bincount(self.tidx, weights=sq, minlength=self.n_tasks)


class MTLObjective:
    """Mean over tasks of the per-task physics-informed loss.

    ``unknown`` lists operator parameters that are inferred per task; each is
    carried as ``log_<name>`` in the network's ``task_params``.
    """

    def __init__(self, problem: Problem, datasets: list[TaskDataset],
                 weights: LossWeights | None = None, unknown=(), params=None, l2: float = 0.0,
                 layout: str = "auto"):
        if not datasets:
            raise ValueError("need at least one task")
        self.problem = problem
        self.weights = weights or LossWeights()
        self.unknown = tuple(unknown)
        self.params = dict(problem.defaults)
        self.params.update(params or {})
        self.l2 = l2
        self.n_tasks = len(datasets)
        for d in datasets:
            if all(d.channel(ch) is None for ch in CHANNELS):
                raise ValueError(f"task {d.task_id} has no measurements in any channel")
        self.channels = []
        for ch in CHANNELS:
            w = getattr(self.weights, ch)
            if any(d.channel(ch) is not None for d in datasets):
                self.channels.append(_Channel(ch, problem, datasets, w, self.n_tasks, layout))

    def predictions(self, theta, heads, task_params=None, frozen=False):
        """Model output of each channel in the channel's layout."""
        task_params = task_params or {}
        out = {}
        for chan in self.channels:
            feats = chan.features(theta, frozen)
            u = chan.raw_jet(feats, heads)
            if chan.g is not None:
                u = constrain(chan.g, u)
            if chan.name == "f":
                p = dict(self.params)
                for name in self.unknown:
                    p[name] = chan.spread(ad.exp(task_params["log_" + name]))
                pred = self.problem.operator(u, chan.X if chan.dense else chan.X[chan.pidx], p)
            elif chan.name == "b":
                pred = self.problem.boundary(u, chan.X)
            else:
                pred = u[()]
            out[chan.name] = pred
        return out

    def terms(self, theta, heads, task_params=None, frozen=False):
        """Weighted squared residuals per channel (arrays or tensors)."""
        preds = self.predictions(theta, heads, task_params, frozen)
        return {c.name: c.squared_error(preds[c.name]) for c in self.channels}

    def loss(self, theta, heads, task_params=None, frozen=False):
        terms = self.terms(theta, heads, task_params, frozen)
        total = None
        for sq in terms.values():
            s = ad.tsum(sq)
            total = s if total is None else total + s
        if self.l2 > 0:
            reg = ad.tsum(heads * heads) * (1.0 / self.n_tasks)
            for w, _ in theta:
                reg = reg + ad.tsum(w * w)
            total = total + self.l2 * reg
        return total

    def per_task(self, theta, heads, task_params=None) -> dict:
        """Per-task value of each channel term (numpy)."""
        terms = self.terms(theta, heads, task_params)
        out = {}
        for chan in self.channels:
            out[chan.name] = chan.per_task(ad._data(terms[chan.name])) * self.n_tasks
        return out

    def value_and_grad(self, net: MHNetwork):
        theta = [(ad.param(w), ad.param(b)) for w, b in zip(net.weights, net.biases)]
        heads = ad.param(net.heads)
        tp = {"log_" + n: ad.param(net.task_params["log_" + n]) for n in self.unknown}
        total = self.loss(theta, heads, tp)
        total.backward()
        grads = []
        for w, b in theta:
            grads += [_grad(w), _grad(b)]
        grads.append(_grad(heads))
        grads += [_grad(tp["log_" + n]) for n in self.unknown]
        return total.item(), grads, total


def _grad(t):
    return np.zeros_like(t.data) if t.grad is None else t.grad


def task_loss(problem: Problem, theta, head, dataset: TaskDataset, weights=None, params=None) -> float:
    """Loss of a single task for the given body and head."""
    obj = MTLObjective(problem, [dataset], weights, params=params)
    return float(obj.loss(theta, np.asarray(head)[None, :]))


def mtl_loss(problem: Problem, theta, heads, datasets, weights=None, task_params=None,
             unknown=(), params=None) -> float:
    obj = MTLObjective(problem, datasets, weights, unknown=unknown, params=params)
    return float(obj.loss(theta, np.asarray(heads), task_params))


def ensure_task_params(net: MHNetwork, unknown, init_value: float = 1.0) -> None:
    for name in unknown:
        key = "log_" + name
        if key not in net.task_params:
            net.task_params[key] = np.full(net.n_heads, np.log(init_value))


@dataclass
class LossTrace:
    rows: list = field(default_factory=list)

    HEADER = ("iteration", "total", "mean_f", "mean_b", "mean_u")

    def record(self, it, total, per_task: dict):
        means = [float(per_task[ch].mean()) if ch in per_task else 0.0 for ch in CHANNELS]
        self.rows.append((it, float(total), *means))

    @property
    def totals(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


def train_mtl(net: MHNetwork, problem: Problem, datasets, adam: AdamConfig | None = None,
              weights: LossWeights | None = None, unknown=(), l2: float = 0.0,
              log_every: int = 100, params=None):
    """Full-batch Adam on the body, all heads and per-task unknown parameters.

    Returns ``(net, trace)``; ``net`` is updated in place.
    """
    adam = adam or AdamConfig()
    ensure_task_params(net, unknown)
    obj = MTLObjective(problem, datasets, weights, unknown=unknown, params=params, l2=l2)
    if net.n_heads != obj.n_tasks:
        raise ValueError(f"network has {net.n_heads} heads for {obj.n_tasks} tasks")
    state = []
    for w, b in zip(net.weights, net.biases):
        state += [w, b]
    state.append(net.heads)
    state += [net.task_params["log_" + n] for n in unknown]
    opt = Adam(state, adam)
    trace = LossTrace()
    for it in range(adam.iterations + 1):
        value, grads, _ = obj.value_and_grad(net)
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite training loss at iteration {it}")
        if it % log_every == 0 or it == adam.iterations:
            trace.record(it, value, obj.per_task(net.theta, net.heads, net.task_params))
            log.debug("iteration %d loss %.6e", it, value)
        if it == adam.iterations:
            break
        opt.step(grads)
    net.meta["iterations"] = int(net.meta.get("iterations", 0)) + adam.iterations
    return net, trace


def train_stl(problem: Problem, datasets, config: BodyConfig, head_init: InitStrategy | None = None,
              adam: AdamConfig | None = None, seed: int = 0, weights=None, unknown=(),
              l2: float = 0.0, params=None):
    """One independently trained single-head network per task."""
    nets = []
    for k, d in enumerate(datasets):
        sub_seed = int(make_rng(seed, 7, k).integers(2 ** 62))
        net = MHNetwork.create(config, 1, head_init, seed=sub_seed)
        train_mtl(net, problem, [d], adam, weights, unknown, l2, params=params)
        nets.append(net)
    return nets
