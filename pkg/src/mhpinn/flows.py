"""Normalizing flows over head vectors: MAF, IAF and RealNVP.

Every bijector is an affine map ``x = z * exp(s) + m`` whose shift ``m`` and
log-scale ``s = tanh(raw)`` come from a MADE conditioner.  MAF conditions on
``x`` (density pass is one shot, sampling is sequential), IAF conditions on
``z`` (the mirror image) and RealNVP is a MADE with two degree blocks, so
the second half of the coordinates is an affine function of the first half.

A model stacks bijectors with a coordinate reversal between neighbours, on
top of a per-dimension standardization of the training data.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import tape as ad
from .errors import NonFiniteError
from .mhnet import InitStrategy, init
from .mtl import Adam, AdamConfig
from .rng import make_rng

log = logging.getLogger(__name__)

KINDS = ("maf", "iaf", "realnvp")
LOG_2PI = math.log(2 * math.pi)


def input_degrees(kind: str, D: int) -> np.ndarray:
    if kind == "realnvp":
        d = D // 2
        return np.array([1] * d + [2] * (D - d))
    return np.arange(1, D + 1)


def made_masks(D: int, widths=(100, 100), kind: str = "maf"):
    """Binary masks of a MADE with inputs, hidden layers and a (shift, raw) output.

    Returns ``(masks, out_bias_mask)``: one mask per weight matrix, shaped
    like the matrix, and a mask for the output bias.  Output ``i`` only sees
    inputs of strictly smaller degree.
    """
    if D < 1:
        raise ValueError("flow dimension must be at least 1")
    deg_in = input_degrees(kind, D)
    if kind == "realnvp":
        top = 1
        hidden = [np.ones(w, dtype=int) for w in widths]
    else:
        top = max(D - 1, 1)
        hidden = [np.arange(w) % top + 1 for w in widths]
    masks = []
    prev = deg_in
    for deg in hidden:
        masks.append((deg[None, :] >= prev[:, None]).astype(np.float64))
        prev = deg
    out = (deg_in[None, :] > prev[:, None]).astype(np.float64)
    masks.append(np.concatenate([out, out], axis=1))
    if kind == "realnvp":
        keep = (deg_in > 1).astype(np.float64)
    else:
        keep = np.ones(D)
    return masks, np.concatenate([keep, keep])


def conditioner(params, masks, out_bias_mask, x):
    """Shift and raw log-scale at ``x`` (rows); works on arrays and tape tensors."""
    n_layers = len(masks)
    h = x
    for k in range(n_layers):
        W, b = params[2 * k], params[2 * k + 1]
        if k == n_layers - 1:
            out = h @ (W * masks[k]) + b * out_bias_mask
        else:
            h = ad.relu(h @ (W * masks[k]) + b)
    D = masks[-1].shape[1] // 2
    return out[:, :D], out[:, D:]


@dataclass
class Bijector:
    """One affine autoregressive (or coupling) step with its conditioner weights."""

    kind: str
    params: list
    masks: list
    out_bias_mask: np.ndarray

    @property
    def dim(self) -> int:
        return self.out_bias_mask.size // 2

    def _cond(self, v, params=None):
        m, raw = conditioner(params or self.params, self.masks, self.out_bias_mask, v)
        return m, ad.tanh(raw)

    def _parallel_forward(self, z, params=None):
        m, s = self._cond(z, params)
        return z * ad.exp(s) + m, ad.tsum(s, axis=1)

    def _parallel_inverse(self, x, params=None):
        m, s = self._cond(x, params)
        return (x - m) * ad.exp(-1.0 * s), -1.0 * ad.tsum(s, axis=1)

    def _sequential(self, v, params, invert: bool):
        """Solve the autoregressive recursion one degree at a time."""
        D = self.dim
        out = ad._data(v) * 0.0
        cols = np.arange(D)[None, :]
        for i in range(D):
            m, s = self._cond(out, params)
            if invert:
                step = (v - m) * ad.exp(-1.0 * s)
            else:
                step = v * ad.exp(s) + m
            out = ad.where(cols == i, step, out)
        # log-scales evaluated at the converged conditioner input
        _, s = self._cond(out, params)
        ld = ad.tsum(s, axis=1)
        return out, (-1.0 * ld if invert else ld)

    def forward(self, z, params=None):
        """Sampling direction: ``z -> (x, log|det dx/dz|)``."""
        z = _rows(z)
        if self.kind == "maf":
            return self._sequential(z, params, invert=False)
        return self._parallel_forward(z, params)

    def inverse(self, x, params=None):
        """Density direction: ``x -> (z, log|det dz/dx|)``."""
        x = _rows(x)
        if self.kind == "iaf":
            return self._sequential(x, params, invert=True)
        return self._parallel_inverse(x, params)


def _rows(v):
    if isinstance(v, ad.Tensor):
        return v if v.ndim == 2 else ad.reshape(v, (1, -1))
    return np.atleast_2d(np.asarray(v, dtype=np.float64))


@dataclass
class FlowModel:
    kind: str
    bijectors: list
    mean: np.ndarray
    std: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown flow kind {self.kind!r}; choose from {KINDS}")
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("standardization scales must be positive")
        self._packed = None

    @classmethod
    def create(cls, dim: int, kind: str = "maf", n_bijectors: int = 10, widths=(100, 100),
               seed: int = 0) -> "FlowModel":
        """Identity-initialized flow: hidden layers Glorot-uniform, output layer zero."""
        if kind not in KINDS:
            raise ValueError(f"unknown flow kind {kind!r}; choose from {KINDS}")
        masks, obm = made_masks(dim, widths, kind)
        sizes = (dim,) + tuple(widths)
        bijectors = []
        for k in range(n_bijectors):
            params = []
            for j, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                params += [init(InitStrategy("gu"), (a, b), make_rng(seed, 2, k, j)), np.zeros(b)]
            params += [np.zeros((sizes[-1], 2 * dim)), np.zeros(2 * dim)]
            bijectors.append(Bijector(kind, params, masks, obm))
        meta = {"seed": int(seed), "widths": list(widths)}
        return cls(kind, bijectors, np.zeros(dim), np.ones(dim), meta)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def params(self) -> list:
        return [p for b in self.bijectors for p in b.params]

    def invalidate(self):
        self._packed = None

    # density direction ----------------------------------------------------

    def _pullback(self, y, params=None):
        """Standardized data to base space; returns ``(z, sum of log-dets)``."""
        K = len(self.bijectors)
        per = len(self.bijectors[0].params)
        u = y
        total = 0.0
        for k in range(K - 1, -1, -1):
            if k < K - 1:
                u = u[:, ::-1]
            p = None if params is None else params[k * per:(k + 1) * per]
            u, ld = self.bijectors[k].inverse(u, p)
            total = total + ld
        return u, total

    def standardize(self, H):
        return (np.atleast_2d(np.asarray(H, dtype=np.float64)) - self.mean) / self.std

    def log_prob(self, H) -> np.ndarray | float:
        """``log p(H)`` per row; a single vector gives a float."""
        H = np.asarray(H, dtype=np.float64)
        single = H.ndim == 1
        y = self.standardize(H)
        if y.shape[1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {y.shape[1]}")
        z, ld = self._pullback(y)
        lp = base_log_prob(z) + ld - np.log(self.std).sum()
        if not np.all(np.isfinite(lp)):
            raise NonFiniteError("non-finite flow log-density")
        return float(lp[0]) if single else lp

    def log_prob_grad(self, h) -> tuple[float, np.ndarray]:
        """Log-density of one vector and its gradient with respect to it."""
        h = np.asarray(h, dtype=np.float64).ravel()
        if self.kind != "iaf":
            from ._kernels import flow_logp_grad
            if self._packed is None:
                self._packed = pack(self)
            lp, g = flow_logp_grad(self._packed, h)
        else:
            leaf = ad.param(h[None, :])
            y = (leaf - self.mean) * (1.0 / self.std)
            z, ld = self._pullback(y)
            out = ad.tsum(-0.5 * z * z) + ad.tsum(ld)
            out.backward()
            lp = out.item() - 0.5 * self.dim * LOG_2PI - np.log(self.std).sum()
            g = leaf.grad.ravel()
        if not (np.isfinite(lp) and np.all(np.isfinite(g))):
            raise NonFiniteError("non-finite flow log-density")
        return float(lp), g

    # sampling direction ---------------------------------------------------

    def push_forward(self, z):
        K = len(self.bijectors)
        u = _rows(z)
        total = 0.0
        for k in range(K):
            u, ld = self.bijectors[k].forward(u)
            total = total + ld
            if k < K - 1:
                u = u[:, ::-1]
        return u, total

    def sample(self, n: int, rng) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        y, _ = self.push_forward(z)
        return y * self.std + self.mean

    def mode_guess(self) -> np.ndarray:
        """Image of the base origin, a cheap starting point near high density."""
        y, _ = self.push_forward(np.zeros((1, self.dim)))
        return (y * self.std + self.mean)[0]

    def save(self, path) -> None:
        save_flow(self, path)

    @classmethod
    def load(cls, path) -> "FlowModel":
        return load_flow(path)


def base_log_prob(z) -> np.ndarray:
    z = np.atleast_2d(z)
    return -0.5 * (z * z).sum(axis=1) - 0.5 * z.shape[1] * LOG_2PI


def _nll(model: FlowModel, tensors, Y, l2: float):
    z, ld = model._pullback(Y, tensors)
    n = Y.shape[0]
    loss = (ad.tsum(0.5 * z * z) - ad.tsum(ld)) * (1.0 / n)
    if l2 > 0:
        for t in tensors[::2]:
            loss = loss + l2 * ad.tsum(t * t)
    return loss


def train_flow(model: FlowModel, samples, epochs: int = 200, batch: int = 100,
               adam: AdamConfig | None = None, seed: int = 0, l2: float = 0.0,
               standardize: bool = True, callback=None):
    """Mini-batch maximum likelihood; returns ``(model, per-epoch mean NLL)``.

    The reported NLL is in the original coordinates (standardization
    included) and excludes the L2 penalty.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if X.shape[0] < 2:
        raise ValueError("need at least two samples to train a flow")
    if X.shape[1] != model.dim:
        raise ValueError(f"samples have dimension {X.shape[1]}, flow has {model.dim}")
    if standardize:
        model.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        model.std = np.where(sd > 1e-12, sd, 1.0)
    adam = adam or AdamConfig()
    Y = model.standardize(X)
    state = model.params
    opt = Adam(state, adam)
    rng = make_rng(seed, 3)
    const = 0.5 * model.dim * LOG_2PI + np.log(model.std).sum()
    trace = []
    n = Y.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            tensors = [ad.param(p) for p in state]
            loss = _nll(model, tensors, Y[idx], l2)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"non-finite flow loss at epoch {epoch}")
            loss.backward()
            opt.step([t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors])
            pen = l2 * sum(float((p * p).sum()) for p in state[::2]) if l2 > 0 else 0.0
            total += (value - pen) * len(idx)
        trace.append(total / n + const)
        if callback is not None:
            model.invalidate()
            callback(epoch, model)
    model.invalidate()
    model.meta["epochs"] = int(model.meta.get("epochs", 0)) + epochs
    return model, np.array(trace)


def mean_nll(model: FlowModel, samples) -> float:
    return float(-np.mean(model.log_prob(np.atleast_2d(samples))))


# packed weights for the density-gradient kernel -----------------------------

@dataclass
class PackedFlow:
    """Pre-masked weights in density-pass order (last bijector first)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    mean: np.ndarray
    std: np.ndarray


def pack(model: FlowModel) -> PackedFlow:
    if model.kind == "iaf":
        raise ValueError("the density kernel needs a one-pass density direction (maf or realnvp)")
    if len(model.bijectors[0].params) != 6:
        raise ValueError("the density kernel expects two hidden layers")
    stages = model.bijectors[::-1]
    masks = stages[0].masks
    obm = stages[0].out_bias_mask

    def stack(i, mask=None):
        arrs = [b.params[i] if mask is None else b.params[i] * mask for b in stages]
        return np.ascontiguousarray(np.stack(arrs), dtype=np.float64)

    return PackedFlow(stack(0, masks[0]), stack(1), stack(2, masks[1]), stack(3),
                      stack(4, masks[2]), stack(5, obm),
                      np.ascontiguousarray(model.mean), np.ascontiguousarray(model.std))


# checkpoint -----------------------------------------------------------------

def save_flow(model: FlowModel, path) -> None:
    doc = {
        "format": "mhpinn-flow",
        "kind": model.kind,
        "dim": model.dim,
        "meta": model.meta,
        "mean": model.mean.tolist(),
        "std": model.std.tolist(),
        "ordering": "reverse-between-bijectors",
        "bijectors": [[{"shape": list(p.shape), "data": p.ravel().tolist()} for p in b.params]
                      for b in model.bijectors],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_flow(path) -> FlowModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "mhpinn-flow":
        raise ValueError(f"{path} is not a flow checkpoint")
    widths = tuple(doc["meta"]["widths"])
    masks, obm = made_masks(doc["dim"], widths, doc["kind"])
    bij = [Bijector(doc["kind"], [np.array(p["data"]).reshape(p["shape"]) for p in ps], masks, obm)
           for ps in doc["bijectors"]]
    return FlowModel(doc["kind"], bij, doc["mean"], doc["std"], doc["meta"])
