"""Error metrics, sample statistics and report files."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def l2_relative_error(pred, ref) -> float:
    """``100 * |pred - ref| / |ref|`` over the evaluation grid, in percent."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    norm = np.linalg.norm(ref)
    if norm == 0:
        raise ValueError("reference has zero norm")
    return float(100.0 * np.linalg.norm(pred - ref) / norm)


def covariance_spectrum(samples, repeats: int = 1) -> np.ndarray:
    """Descending eigenvalues of the empirical covariance across grid points.

    ``samples`` is ``(n, n_points)``; with ``repeats > 1`` it is split into
    that many equal groups and the spectra are averaged.
    """
    S = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if S.shape[0] < 2 * repeats:
        raise ValueError("need at least two samples per group")
    spectra = []
    for part in np.array_split(S, repeats):
        C = np.cov(part, rowvar=False)
        spectra.append(np.linalg.eigvalsh(np.atleast_2d(C))[::-1])
    return np.mean(spectra, axis=0)


def band_stats(samples) -> dict:
    """Pointwise mean and the ``mean +- 2 std`` band."""
    S = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if S.shape[0] < 2:
        raise ValueError("band statistics need at least two samples")
    D = S - S[0]
    mean = S[0] + D.mean(axis=0)
    std = D.std(axis=0)
    return {"mean": mean, "std": std, "lower": mean - 2 * std, "upper": mean + 2 * std}


def band_error(lower, upper, ref_lower, ref_upper) -> float:
    """Sup-norm distance between two bands relative to the sup of the reference band."""
    scale = max(np.abs(ref_lower).max(), np.abs(ref_upper).max())
    return float(max(np.abs(lower - ref_lower).max(), np.abs(upper - ref_upper).max()) / scale)


def coverage(mean, band, ref) -> float:
    """Fraction of points with ``|ref - mean| <= band``."""
    return float(np.mean(np.abs(np.asarray(ref) - mean) <= band))


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (np.floating, float)):
        return float(repr(float(v)))
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def write_metrics(path, record: dict) -> None:
    """Sorted-key JSON, so identical runs give identical bytes."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(_plain(record), indent=1, sort_keys=True) + "\n")


def read_metrics(path) -> dict:
    return json.loads(Path(path).read_text())


def write_plot_data(path, x, mean, lower, upper) -> None:
    x = np.asarray(x)
    x = x.reshape(len(mean), -1)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ["mean", "lower", "upper"])
        for xi, m, lo, hi in zip(x, mean, lower, upper):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(m)), repr(float(lo)), repr(float(hi))])
