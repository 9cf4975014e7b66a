"""Numpy implementation of the flow density-gradient kernel."""
from __future__ import annotations

import math

import numpy as np

LOG_2PI = math.log(2 * math.pi)


def flow_logp_grad(pk, h):
    """``log p(h)`` and its gradient for a packed MAF/RealNVP flow.

    The density pass is ``z = (x - m(x)) exp(-s(x))`` per stage, with the
    coordinates reversed between stages; the backward pass is written out
    by hand.
    """
    K, D, _ = pk.W1.shape
    x = (np.asarray(h, dtype=np.float64) - pk.mean) / pk.std
    tape = []
    logdet = 0.0
    for k in range(K):
        if k:
            x = x[::-1]
        a1 = x @ pk.W1[k] + pk.b1[k]
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ pk.W2[k] + pk.b2[k]
        h2 = np.maximum(a2, 0.0)
        out = h2 @ pk.W3[k] + pk.b3[k]
        s = np.tanh(out[D:])
        es = np.exp(-s)
        z = (x - out[:D]) * es
        logdet -= s.sum()
        tape.append((a1, a2, s, es, z))
        x = z
    logp = -0.5 * (x @ x) - 0.5 * D * LOG_2PI + logdet - np.log(pk.std).sum()
    gz = -x
    for k in range(K - 1, -1, -1):
        a1, a2, s, es, z = tape[k]
        gs = -gz * z - 1.0
        go = np.concatenate([-gz * es, gs * (1.0 - s * s)])
        gh2 = (pk.W3[k] @ go) * (a2 > 0)
        gh1 = (pk.W2[k] @ gh2) * (a1 > 0)
        gz = gz * es + pk.W1[k] @ gh1
        if k:
            gz = gz[::-1]
    return float(logp), gz / pk.std
