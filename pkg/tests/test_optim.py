import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structplast.errors import ConfigError, NumericFault
from structplast.nn import MaskedNetwork, backward, forward, softmax_xent
from structplast.optim import (OptimizerState, TwoSpeed, adam_step, cosine_lr, moment_transplant, sgd_step,
                               two_speed_apply)

from oracles import adam_scalar


def test_sgd_examples():
    p = {"w": np.array([1.0])}
    sgd_step(p, {"w": np.array([0.5])}, 0.1)
    assert p["w"][0] == pytest.approx(0.95)
    sgd_step(p, {"w": np.array([0.0])}, 0.1)
    assert p["w"][0] == pytest.approx(0.95)


def test_sgd_half_batches_average_to_full_batch(rng):
    # quadratic loss 0.5*||A w - y||^2 / n: the full-batch gradient is the mean of the half-batch gradients
    A, y, w = rng.standard_normal((8, 3)), rng.standard_normal(8), rng.standard_normal(3)

    def grad(rows):
        return A[rows].T @ (A[rows] @ w - y[rows]) / len(rows)

    full = {"w": w.copy()}
    sgd_step(full, {"w": grad(np.arange(8))}, 0.1)
    avg = {"w": w.copy()}
    sgd_step(avg, {"w": 0.5 * (grad(np.arange(4)) + grad(np.arange(4, 8)))}, 0.1)
    assert np.allclose(full["w"], avg["w"], atol=1e-15)


def test_sgd_rejects_nonfinite_and_bad_shape():
    with pytest.raises(NumericFault):
        sgd_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0])}, 0.1)
    with pytest.raises(ConfigError):
        sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.1)


def test_cosine_examples():
    assert cosine_lr(0.1, 0, 100) == 0.1
    assert cosine_lr(0.1, 100, 100) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(0.1, 50, 100) == pytest.approx(0.05)
    with pytest.raises(ConfigError):
        cosine_lr(0.1, 101, 100)


def test_adam_first_step_magnitude():
    st_ = OptimizerState("adam", lr=1e-3)
    p = {"w": np.array([1.0, -2.0, 0.5])}
    adam_step(p, {"w": np.array([3.0, -0.01, 1e3])}, st_)
    assert np.allclose(np.abs(p["w"] - [1.0, -2.0, 0.5]), 1e-3, rtol=1e-4)


def test_adam_zero_gradient_keeps_params():
    st_ = OptimizerState("adam")
    p = {"w": np.array([1.0, 2.0])}
    for _ in range(5):
        adam_step(p, {"w": np.zeros(2)}, st_)
    assert p["w"].tolist() == [1.0, 2.0]
    assert st_.step == 5


def test_adam_matches_scalar_reference_on_quadratic(rng):
    target = rng.standard_normal(4)
    p = {"w": rng.standard_normal(4)}
    theta0 = p["w"].copy()
    st_ = OptimizerState("adam", lr=0.05)
    grads = []
    for _ in range(10):
        g = 2 * (p["w"] - target)
        grads.append(g.copy())
        adam_step(p, {"w": g}, st_)
    ref = adam_scalar(theta0, grads, lr=0.05)
    assert np.abs(p["w"] - ref).max() <= 1e-10
    assert np.all(st_.v["w"] >= 0)


def test_optimizer_state_validation():
    with pytest.raises(ConfigError):
        OptimizerState("rmsprop")


def test_two_speed_apply():
    assert two_speed_apply(1.0, 1.2, 5) == pytest.approx(2.0)
    new = np.array([3.0])
    assert two_speed_apply(np.array([1.0]), new, 1) is new


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10))
def test_two_speed_r1_is_exact(old, new):
    assert two_speed_apply(old, new, 1.0) == new


def _train_steps(net, steps, rng, two_speed=None):
    x = rng.standard_normal((steps, 8, 6))
    y = rng.integers(0, 3, (steps, 8))
    for s in range(steps):
        logits, cache = forward(net, x[s])
        g = backward(net, cache, softmax_xent(logits, y[s])[1]).params
        if two_speed is None:
            sgd_step(net.params, g, 0.05)
        else:
            two_speed.step(net.params, lambda: sgd_step(net.params, g, 0.05))


def test_two_speed_r1_bit_identical_trajectory():
    a = MaskedNetwork.mlp(6, (10,), 3, seed=3)
    b = a.copy()
    ts = TwoSpeed(r=1.0, window=1000)
    ts.register("c1-l0-grow", b, 0, [1, 4, 7])
    _train_steps(a, 500, np.random.default_rng(0))
    _train_steps(b, 500, np.random.default_rng(0), ts)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_two_speed_scales_only_newborn_slices():
    net = MaskedNetwork.mlp(6, (10,), 3, seed=3)
    ref = net.copy()
    ts = TwoSpeed(r=5.0, window=10)
    ts.register("e", net, 0, [2])
    g = {k: np.ones_like(v) for k, v in net.params.items()}
    ts.step(net.params, lambda: sgd_step(net.params, g, 0.01))
    sgd_step(ref.params, g, 0.01)
    assert np.allclose(net.params["0.W"][2], ref.params["0.W"][2] - 4 * 0.01)
    assert np.allclose(net.params["1.W"][:, 2], ref.params["1.W"][:, 2] - 4 * 0.01)
    assert np.array_equal(net.params["0.W"][3], ref.params["0.W"][3])
    assert np.array_equal(net.params["1.b"], ref.params["1.b"])


def test_two_speed_window_expires():
    net = MaskedNetwork.mlp(3, (4,), 2)
    ts = TwoSpeed(r=5.0, window=3)
    ts.register("e", net, 0, [0])
    for _ in range(3):
        ts.step(net.params, lambda: None)
    assert ts.births == []
    with pytest.raises(ConfigError):
        TwoSpeed(r=0.0)


def test_moment_transplant_copies_donor_moments(rng):
    net = MaskedNetwork.mlp(4, (5,), 3)
    st_ = OptimizerState("adam")
    g = {k: rng.standard_normal(v.shape) for k, v in net.params.items()}
    adam_step(net.params, g, st_)
    step = st_.step
    moment_transplant(st_, net, 0, {3: 1, 4: 1})
    for buf in (st_.m, st_.v):
        assert np.array_equal(buf["0.W"][3], buf["0.W"][1])
        assert np.array_equal(buf["0.W"][4], buf["0.W"][1])
        assert buf["0.b"][3] == buf["0.b"][1]
        assert np.array_equal(buf["1.W"][:, 4], buf["1.W"][:, 1])
    assert not np.array_equal(st_.m["0.W"][0], st_.m["0.W"][1])
    assert st_.step == step
    with pytest.raises(ConfigError):
        moment_transplant(OptimizerState("sgd"), net, 0, {3: 1})


def test_zero_slices():
    st_ = OptimizerState("adam")
    p = {"w": np.zeros((3, 2))}
    adam_step(p, {"w": np.ones((3, 2))}, st_)
    st_.zero_slices("w", (np.array([1]),))
    assert st_.m["w"][1].tolist() == [0, 0] and st_.v["w"][0].tolist() != [0, 0]
