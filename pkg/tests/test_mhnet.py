import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhpinn.autodiff import tape as ad
from mhpinn.mhnet import (BodyConfig, InitStrategy, MHNetwork, body_forward, init, predict,
                          predict_scalar)
from mhpinn.autodiff.scalar import leaves
from mhpinn.rng import make_rng


@pytest.fixture
def net():
    return MHNetwork.create(BodyConfig(1, (50, 50, 50)), 3, seed=5)


def test_zero_parameters_give_zero_features():
    theta = [(np.zeros((1, 4)), np.zeros(4)), (np.zeros((4, 4)), np.zeros(4))]
    assert np.array_equal(body_forward(theta, np.array([0.7])), np.zeros(4))


def test_identity_layer_is_tanh():
    theta = [(np.eye(3), np.zeros(3))]
    x = np.array([0.01, -0.02, 0.03])
    assert np.allclose(body_forward(theta, x), np.tanh(x), atol=0)


def test_forward_matches_straight_line_algebra(net):
    x = np.array([0.5])
    z = x
    for w, b in zip(net.weights, net.biases):
        z = np.tanh(z @ w + b)
    assert np.max(np.abs(body_forward(net.theta, x) - z)) <= 1e-12


def test_dimension_mismatch(net):
    with pytest.raises(ValueError):
        body_forward(net.theta, np.zeros(2))
    with pytest.raises(ValueError):
        predict(net.theta, np.zeros(50), np.zeros(1))


def test_head_examples(net):
    x = np.linspace(-1, 1, 7)[:, None]
    h = np.zeros(51)
    assert np.array_equal(predict(net.theta, h, x), np.zeros(7))
    h[0] = 1.0
    assert np.allclose(predict(net.theta, h, x), 1.0)
    h = np.zeros(51)
    h[1] = 1.0
    assert np.allclose(predict(net.theta, h, x), body_forward(net.theta, x)[:, 0])


@given(st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=30, deadline=None)
def test_predict_is_affine_in_head(a, b):
    net = MHNetwork.create(BodyConfig(1, (10, 10)), 2, seed=1)
    x = np.linspace(-1, 1, 9)[:, None]
    h1, h2 = net.heads
    lhs = predict(net.theta, a * h1 + b * h2, x)
    rhs = a * predict(net.theta, h1, x) + b * predict(net.theta, h2, x)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_head_gradient_is_one_and_features(net):
    x = np.array([[0.3]])
    _, (g,) = ad.value_and_grad(lambda h: ad.tsum(predict(net.theta, h, x)), net.heads[0])
    assert np.allclose(g, np.concatenate([[1.0], body_forward(net.theta, x)[0]]), atol=0)


def test_features_bounded(net):
    phi = body_forward(net.theta, np.linspace(-50, 50, 101)[:, None])
    assert np.all(np.abs(phi) <= 1.0)


def test_scalar_graph_agrees_with_batched(net):
    x = 0.37
    v = predict_scalar(net.theta, net.heads[1], leaves([x])).value
    assert v == pytest.approx(float(net.predict(np.array([[x]]), 1)[0]), abs=1e-12)


def test_init_rn_std():
    s = init(InitStrategy("rn", 0.05), (100_000,), 3)
    assert abs(s.std() / 0.05 - 1) < 0.02


def test_init_gu_bound():
    s = init(InitStrategy("gu"), (50, 50), 3)
    assert np.abs(s).max() <= math.sqrt(6 / 100) and np.abs(s).max() > 0.2


def test_init_deterministic():
    a = init(InitStrategy("rn", 1.0), (7, 3), 9)
    assert np.array_equal(a, init(InitStrategy("rn", 1.0), (7, 3), 9))
    assert not np.array_equal(a, init(InitStrategy("rn", 1.0), (7, 3), 10))


def test_body_biases_zero_and_heads_rn(net):
    assert all(np.all(b == 0) for b in net.biases)
    assert net.heads.shape == (3, 51)
    assert net.meta["head_init"] == "RN(0.05)"


@pytest.mark.parametrize("text,label", [("rn005", "RN(0.05)"), ("rn1", "RN(1)"), ("gu", "GU"),
                                        ("RN(0.05)", "RN(0.05)"), ("rn(2)", "RN(2)")])
def test_init_strategy_parse(text, label):
    assert InitStrategy.parse(text).label == label


def test_init_strategy_invalid():
    with pytest.raises(ValueError):
        InitStrategy.parse("xavier")
    with pytest.raises(ValueError):
        InitStrategy("rn", 0.0)
    with pytest.raises(ValueError):
        BodyConfig(1, (0,))


def test_stacked_heads_for_vector_output():
    net = MHNetwork.create(BodyConfig(1, (6,)), 2, seed=0, n_outputs=2)
    x = np.linspace(0, 1, 4)[:, None]
    out = predict(net.theta, net.heads[0], x)
    assert out.shape == (4, 2)
    assert np.allclose(out[:, 1], predict(net.theta, net.heads[0, 1], x))


def test_checkpoint_round_trip_bit_exact(net, tmp_path):
    net.task_params["log_lam"] = make_rng(1).normal(size=3)
    net.save(tmp_path / "n.json")
    back = MHNetwork.load(tmp_path / "n.json")
    x = np.linspace(-1, 1, 11)[:, None]
    for k in range(3):
        assert np.array_equal(net.predict(x, k), back.predict(x, k))
    assert np.array_equal(back.task_params["log_lam"], net.task_params["log_lam"])
    assert back.meta == net.meta


def test_checkpoint_rejects_other_files(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        MHNetwork.load(tmp_path / "x.json")
