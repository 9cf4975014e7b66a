import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhpinn.eval import (band_error, band_stats, coverage, covariance_spectrum, l2_relative_error,
                         read_metrics, write_metrics, write_plot_data)
from mhpinn.problems import generators as gen
from mhpinn.rng import make_rng


def test_l2_examples():
    ref = np.array([1.0, -2.0, 3.0])
    assert l2_relative_error(ref, ref) == 0
    assert l2_relative_error(np.zeros(3), ref) == pytest.approx(100)
    assert l2_relative_error([0.0, 1.0], [1.0, 0.0]) == pytest.approx(100 * math.sqrt(2))


def test_l2_errors():
    with pytest.raises(ValueError):
        l2_relative_error([1.0], [0.0])
    with pytest.raises(ValueError):
        l2_relative_error([1.0, 2.0], [1.0])


@given(st.floats(0.1, 10), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_l2_scale_equivariance_and_permutation(c, seed):
    rng = make_rng(seed)
    ref = rng.normal(size=8) + 3
    pred = ref + rng.normal(size=8)
    e = l2_relative_error(pred, ref)
    assert l2_relative_error(ref + c * (pred - ref), ref) == pytest.approx(c * e, rel=1e-10)
    perm = rng.permutation(8)
    assert l2_relative_error(pred[perm], ref[perm]) == pytest.approx(e, rel=1e-12)


def test_spectrum_of_iid_noise():
    eig = covariance_spectrum(make_rng(1).standard_normal((10_000, 10)))
    assert np.all(np.abs(eig - 1) < 0.1)
    assert np.all(np.diff(eig) <= 0)


def test_spectrum_rank_one():
    v = np.array([1.0, -2.0, 0.5])
    c = make_rng(2).normal(size=(500, 1))
    eig = covariance_spectrum(c * v)
    assert eig[0] > 0 and np.all(np.abs(eig[1:]) < 1e-10 * eig[0])


def test_spectrum_of_gp_draws():
    grid = np.linspace(0, 1, 41)
    draws = gen.sample_gp(0.1, grid, make_rng(3), n=10_000)
    true = np.linalg.eigvalsh(gen.sq_exp_kernel(grid, grid, 0.1))[::-1][:5]
    assert np.all(np.abs(covariance_spectrum(draws)[:5] / true - 1) < 0.1)


def test_spectrum_trace_and_floor():
    S = make_rng(4).normal(size=(50, 6)) @ make_rng(5).normal(size=(6, 6))
    eig = covariance_spectrum(S)
    assert eig.min() > -1e-10
    assert eig.sum() == pytest.approx(np.trace(np.cov(S, rowvar=False)), rel=1e-10)
    assert covariance_spectrum(S, repeats=2).shape == (6,)
    with pytest.raises(ValueError):
        covariance_spectrum(S[:1])


def test_band_examples():
    same = np.tile([1.0, 2.0, 3.0], (4, 1))
    b = band_stats(same)
    assert np.all(b["upper"] == b["lower"])
    two = band_stats(np.array([[0.0, 0.0], [2.0, 2.0]]))
    assert np.allclose(two["mean"], 1) and np.allclose(two["upper"] - two["mean"], 2)
    mc = band_stats(make_rng(6).standard_normal((100_000, 3)))
    assert np.allclose(mc["upper"], 2, rtol=0.03) and np.allclose(mc["lower"], -2, rtol=0.03)
    with pytest.raises(ValueError):
        band_stats(np.zeros((1, 3)))


def test_band_error_and_coverage():
    lo, hi = np.array([-1.0, -2.0]), np.array([1.0, 2.0])
    assert band_error(lo, hi, lo, hi) == 0
    assert band_error(lo - 0.2, hi, lo, hi) == pytest.approx(0.1)
    assert coverage(np.zeros(4), np.ones(4), [0.5, -1.0, 1.5, 0.0]) == 0.75


def test_metrics_are_byte_stable(tmp_path):
    rec = {"b": np.float64(0.1) + np.float64(0.2), "a": [np.int64(3), np.array([1.5, 2.5])],
           "flag": np.bool_(True)}
    write_metrics(tmp_path / "m1.json", rec)
    write_metrics(tmp_path / "m2.json", dict(reversed(list(rec.items()))))
    assert (tmp_path / "m1.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    back = read_metrics(tmp_path / "m1.json")
    assert back["b"] == 0.1 + 0.2 and back["a"] == [3, [1.5, 2.5]] and back["flag"] is True


def test_plot_data_columns(tmp_path):
    x = np.linspace(0, 1, 3)
    write_plot_data(tmp_path / "p.csv", x, x, x - 1, x + 1)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "x0,mean,lower,upper"
    assert [float(v) for v in lines[2].split(",")] == [0.5, 0.5, -0.5, 1.5]
    write_plot_data(tmp_path / "q.csv", np.zeros((2, 2)), [0, 0], [0, 0], [0, 0])
    assert (tmp_path / "q.csv").read_text().splitlines()[0] == "x0,x1,mean,lower,upper"
