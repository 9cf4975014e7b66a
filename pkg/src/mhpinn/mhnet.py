"""Multi-head network: a shared tanh body and one linear head per task.

The surrogate for task ``k`` is ``u_k(x) = h_k[0] + h_k[1:] @ phi(x)`` where
``phi`` is the output of the last hidden layer of the body.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import tape as ad
from .autodiff.scalar import Value, vsum, vtanh
from .rng import make_rng

CHECKPOINT_VERSION = 1


@dataclass
class BodyConfig:
    input_dim: int
    widths: tuple = (50, 50, 50)
    activation: str = "tanh"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.input_dim < 1 or not self.widths or min(self.widths) < 1:
            raise ValueError(f"invalid body configuration {self}")
        if self.activation != "tanh":
            raise ValueError("only tanh bodies are supported")

    @property
    def n_basis(self) -> int:
        return self.widths[-1]

    @property
    def head_size(self) -> int:
        return self.widths[-1] + 1


@dataclass(frozen=True)
class InitStrategy:
    """Random normal ``RN(sigma)`` or Glorot uniform ``GU``."""

    kind: str = "rn"
    sigma: float = 0.05

    def __post_init__(self):
        if self.kind not in ("rn", "gu"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.kind == "rn" and not self.sigma > 0:
            raise ValueError("RN init needs sigma > 0")

    @classmethod
    def parse(cls, text: str) -> "InitStrategy":
        """Accepts ``rn005``, ``rn1``, ``gu``, ``rn(0.05)``, ``RN(1)``."""
        t = text.strip().lower().replace(" ", "")
        if t == "gu":
            return cls("gu")
        m = re.fullmatch(r"rn\(?([0-9.]+)\)?", t)
        if not m:
            raise ValueError(f"cannot parse init strategy {text!r}")
        digits = m.group(1)
        if "." in digits or "(" in t:
            sigma = float(digits)
        else:
            # rn005 -> 0.05, rn1 -> 1, rn01 -> 0.1
            sigma = float(digits) if digits[0] != "0" else float("0." + digits[1:])
        return cls("rn", sigma)

    @property
    def label(self) -> str:
        return "GU" if self.kind == "gu" else f"RN({self.sigma:g})"


def init(strategy: InitStrategy, shape, seed, fan=None) -> np.ndarray:
    """Draw a parameter array.

    ``seed`` is an int or a ``numpy.random.Generator``.  ``fan`` overrides the
    ``(fan_in, fan_out)`` pair used by Glorot; by default it is read from a
    2-D ``shape``.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if min(shape) < 1:
        raise ValueError(f"shape must be positive, got {shape}")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    if strategy.kind == "rn":
        return rng.normal(0.0, strategy.sigma, size=shape)
    if fan is None:
        fan = (shape[0], shape[-1]) if len(shape) >= 2 else (shape[0], shape[0])
    bound = math.sqrt(6.0 / (fan[0] + fan[1]))
    return rng.uniform(-bound, bound, size=shape)


def init_body(config: BodyConfig, seed: int):
    """Glorot-uniform weights and zero biases for every hidden layer."""
    sizes = (config.input_dim,) + config.widths
    weights, biases = [], []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        weights.append(init(InitStrategy("gu"), (n_in, n_out), make_rng(seed, 0, k)))
        biases.append(np.zeros(n_out))
    return weights, biases


@dataclass
class MHNetwork:
    config: BodyConfig
    weights: list
    biases: list
    heads: np.ndarray
    task_params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.heads = np.asarray(self.heads, dtype=np.float64)
        if self.heads.shape[-1] != self.config.head_size:
            raise ValueError(
                f"heads have length {self.heads.shape[-1]}, expected {self.config.head_size}")

    @classmethod
    def create(cls, config: BodyConfig, n_heads: int, head_init: InitStrategy | None = None,
               seed: int = 0, n_outputs: int = 1, task_params=None) -> "MHNetwork":
        head_init = head_init or InitStrategy("rn", 0.05)
        weights, biases = init_body(config, seed)
        shape = (n_heads, config.head_size) if n_outputs == 1 else (n_heads, n_outputs, config.head_size)
        heads = init(head_init, shape, make_rng(seed, 1), fan=(config.n_basis, 1))
        meta = {"seed": int(seed), "head_init": head_init.label}
        return cls(config, weights, biases, heads, dict(task_params or {}), meta)

    @property
    def theta(self):
        return list(zip(self.weights, self.biases))

    @property
    def n_heads(self) -> int:
        return self.heads.shape[0]

    def predict(self, x, k: int = 0):
        return predict(self.theta, self.heads[k], x)

    def features(self, x) -> np.ndarray:
        return body_forward(self.theta, x)

    def copy(self) -> "MHNetwork":
        return MHNetwork(self.config, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.heads.copy(),
                         {k: np.array(v, copy=True) for k, v in self.task_params.items()},
                         dict(self.meta))

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "MHNetwork":
        return load_checkpoint(path)


def body_forward(theta, x):
    """Body features ``phi(x)``; ``x`` is one point ``(D_x,)`` or a batch ``(n, D_x)``.

    Works on numpy arrays and on tape tensors.
    """
    xd = ad._data(x)
    d_in = ad._data(theta[0][0]).shape[0]
    if xd.shape[-1] != d_in:
        raise ValueError(f"input dimension {xd.shape[-1]} does not match body input {d_in}")
    z = x
    for w, b in theta:
        z = ad.tanh(z @ w + b)
    return z


def predict(theta, head, x):
    """``h0 + h[1:] @ phi(x)``; stacked heads ``(D_u, L+1)`` give one output per row."""
    hd = ad._data(head)
    n_basis = ad._data(theta[-1][0]).shape[1]
    if hd.shape[-1] != n_basis + 1:
        raise ValueError(f"head length {hd.shape[-1]} does not match {n_basis} basis functions")
    phi = body_forward(theta, x)
    if hd.ndim == 1:
        return phi @ head[1:] + head[0]
    return phi @ ad.transpose(head[:, 1:]) + head[:, 0]


def predict_scalar(theta, head, x: list[Value]) -> Value:
    """Same surrogate evaluated on the scalar graph (oracle and second-derivative path)."""
    z = list(x)
    for w, b in theta:
        w = np.asarray(w)
        b = np.asarray(b)
        z = [vtanh(vsum([z[i] * float(w[i, j]) for i in range(len(z))]) + float(b[j]))
             for j in range(w.shape[1])]
    head = np.asarray(head)
    return vsum([z[j] * float(head[j + 1]) for j in range(len(z))]) + float(head[0])


def body_jet(theta, X: np.ndarray, first=(), second=()):
    """Body features and pure input derivatives at the rows of ``X``.

    Returns a dict keyed by ``()`` for the features, ``(i,)`` for d/dx_i and
    ``(i, i)`` for d^2/dx_i^2, each ``(n, L)``.  Derivative channels are
    stacked under the value rows so each layer is a single matmul.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d_x = X.shape
    first = tuple(sorted(set(first) | set(second)))
    second = tuple(sorted(set(second)))
    if any(not 0 <= i < d_x for i in first):
        raise IndexError(f"derivative index out of range for input dimension {d_x}")
    n1, n2 = len(first), len(second)
    y = dy = d2y = None
    for layer, (w, b) in enumerate(theta):
        if layer == 0:
            a = X @ w + b
            da = [w[i:i + 1] for i in first]
            d2a = [None] * n2
        else:
            z = ad.concat([y] + dy + d2y, axis=0) if (n1 + n2) else y
            az = z @ w
            a = az[:n] + b if (n1 + n2) else az + b
            da = [az[n * (1 + k): n * (2 + k)] for k in range(n1)]
            d2a = [az[n * (1 + n1 + k): n * (2 + n1 + k)] for k in range(n2)]
        y = ad.tanh(a)
        s = 1.0 - y * y
        dy = [s * da_k for da_k in da]
        d2y = []
        for k, i in enumerate(second):
            da_i = da[first.index(i)]
            curv = -2.0 * y * s * (da_i * da_i)
            d2y.append(curv if d2a[k] is None else s * d2a[k] + curv)
    out = {(): y}
    for k, i in enumerate(first):
        out[(i,)] = dy[k]
    for k, i in enumerate(second):
        out[(i, i)] = d2y[k]
    return out


# checkpoints ------------------------------------------------------------------

def _to_list(a):
    return np.asarray(a, dtype=np.float64).ravel().tolist()


def save_checkpoint(net: MHNetwork, path) -> None:
    """Structured JSON; floats use repr so reloading is bit-exact."""
    doc = {
        "format": "mhpinn-network",
        "version": CHECKPOINT_VERSION,
        "input_dim": net.config.input_dim,
        "widths": list(net.config.widths),
        "activation": net.config.activation,
        "meta": net.meta,
        "weights": [{"shape": list(w.shape), "data": _to_list(w)} for w in net.weights],
        "biases": [_to_list(b) for b in net.biases],
        "heads": {"shape": list(net.heads.shape), "data": _to_list(net.heads)},
        "task_params": {k: _to_list(v) for k, v in net.task_params.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> MHNetwork:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "mhpinn-network":
        raise ValueError(f"{path} is not a network checkpoint")
    config = BodyConfig(doc["input_dim"], tuple(doc["widths"]), doc["activation"])
    weights = [np.array(w["data"]).reshape(w["shape"]) for w in doc["weights"]]
    biases = [np.array(b) for b in doc["biases"]]
    heads = np.array(doc["heads"]["data"]).reshape(doc["heads"]["shape"])
    tp = {k: np.array(v) for k, v in doc.get("task_params", {}).items()}
    return MHNetwork(config, weights, biases, heads, tp, doc.get("meta", {}))
