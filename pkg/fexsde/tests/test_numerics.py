import numpy as np
import pytest

from fexsde.errors import CacheContractError, ConfigurationError
from fexsde.numerics import (
    AdamState, CosineSchedule, DenseNet, Optimizer, adam_step, backward, cosine_lr, forward, lbfgs_refine,
)


def test_zero_network_outputs_zero():
    net = DenseNet([3, 8, 2])
    net.set_params(np.zeros(net.n_params))
    out = net(np.random.default_rng(0).normal(size=(5, 3)))
    np.testing.assert_array_equal(out, np.zeros((5, 2)))


def test_single_layer_identity():
    net = DenseNet([1, 1], "tanh")
    net.set_params(np.array([1.0, 0.0]))
    np.testing.assert_array_equal(net(np.array([0.0])), [0.0])


def test_forward_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        forward(DenseNet([2, 4, 1]), np.zeros((3, 5)))


def random_network(rng: np.random.Generator, activation: str):
    hidden = [int(n) for n in rng.integers(2, 9, size=rng.integers(1, 3))]
    sizes = [int(rng.integers(1, 4))] + hidden + [int(rng.integers(1, 4))]
    net = DenseNet(sizes, activation, rng)
    # входы, у которых ни один скрытый нейрон не сидит на изломе ReLU
    while True:
        x = rng.normal(size=(int(rng.integers(3, 7)), sizes[0]))
        _, cache = forward(net, x)
        if min(np.min(np.abs(z)) for z in cache.pre[:-1]) > 1e-3:
            return net, x


@pytest.mark.parametrize("activation", ["tanh", "relu", "identity"])
def test_backward_matches_central_differences(activation):
    rng = np.random.default_rng(42)
    h = 1e-5
    for _ in range(20):
        net, x = random_network(rng, activation)
        upstream = rng.normal(size=(len(x), net.output_size))
        _, cache = forward(net, x)
        analytic = backward(net, cache, upstream)

        params = net.get_params()
        shifted_net = DenseNet(net.layer_sizes, activation)
        numeric = np.zeros_like(params)
        floor = np.zeros_like(params)
        for k in range(len(params)):
            shifted = params.copy()
            shifted[k] += h
            shifted_net.set_params(shifted)
            y_up = upstream * shifted_net(x)
            shifted[k] -= 2 * h
            shifted_net.set_params(shifted)
            y_down = upstream * shifted_net(x)
            numeric[k] = (np.sum(y_up) - np.sum(y_down)) / (2 * h)
            scale = np.sum(np.abs(y_up)) + np.sum(np.abs(y_down)) + 2 * np.sum(np.abs(upstream))
            floor[k] = 16 * np.finfo(float).eps * scale / (2 * h)

        checked = np.abs(analytic) > 1e5 * floor
        rel = np.abs(analytic - numeric)[checked] / np.abs(analytic)[checked]
        assert np.all(rel < 1e-5), (net.layer_sizes, rel.max())
        assert np.all(np.abs(analytic - numeric) <= 1e-5 * np.abs(analytic) + 2 * floor + 1e-12)


def test_backward_rejects_stale_cache():
    net = DenseNet([2, 4, 1])
    _, cache = forward(net, np.ones((2, 2)))
    net.set_params(net.get_params() * 0.5)
    with pytest.raises(CacheContractError):
        backward(net, cache, np.ones((2, 1)))


def test_json_round_trip_preserves_outputs():
    net = DenseNet([2, 5, 2], rng=np.random.default_rng(9))
    restored = DenseNet.from_json(net.to_json())
    x = np.random.default_rng(1).normal(size=(4, 2))
    np.testing.assert_array_equal(net(x), restored(x))


def test_adam_zero_gradients():
    state = AdamState(3, lr=0.1)
    params = np.array([1.0, -2.0, 3.0])
    updated, ok = adam_step(state, params, np.zeros(3))
    assert ok
    np.testing.assert_array_equal(updated, params)


def test_adam_first_step():
    state = AdamState(1, lr=0.01)
    updated, ok = adam_step(state, np.array([0.0]), np.array([1.0]))
    assert ok
    assert updated[0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_weight_decay_shrinks():
    state = AdamState(2, lr=0.1, weight_decay=1e-6)
    params = np.array([1.0, -1.0])
    updated, _ = adam_step(state, params, np.zeros(2))
    assert np.all(np.abs(updated) < np.abs(params))


def test_adam_rejects_non_finite():
    state = AdamState(2, lr=0.1)
    params = np.array([1.0, 2.0])
    updated, ok = adam_step(state, params, np.array([np.nan, 1.0]))
    assert not ok
    assert state.step == 0
    np.testing.assert_array_equal(updated, params)


def test_optimizer_names():
    sgd = Optimizer("sgd", 1, lr=0.5)
    updated, ok = sgd.step(np.array([1.0]), np.array([1.0]))
    assert ok and updated[0] == pytest.approx(0.5)
    with pytest.raises(ConfigurationError):
        Optimizer("rmsprop", 1, lr=0.1)


def test_cosine_schedule():
    schedule = CosineSchedule(0.2, 100)
    assert cosine_lr(schedule, 0) == pytest.approx(0.2)
    assert cosine_lr(schedule, 50) == pytest.approx(0.1)
    assert cosine_lr(schedule, 100) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(schedule, 500) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ConfigurationError):
        CosineSchedule(0.1, 0)


def test_lbfgs_quadratic():
    result = lbfgs_refine(lambda p: (float((p[0] - 3.0) ** 2), np.array([2.0 * (p[0] - 3.0)])), np.array([0.0]))
    assert result.params[0] == pytest.approx(3.0, abs=1e-8)
    assert result.improved


def test_lbfgs_already_optimal():
    result = lbfgs_refine(lambda p: (float(p @ p), 2.0 * p), np.zeros(2))
    np.testing.assert_allclose(result.params, 0.0, atol=1e-12)
    assert result.value <= result.initial_value


def test_lbfgs_rosenbrock():
    def rosenbrock(p):
        x, y = p
        value = (1 - x) ** 2 + 100 * (y - x * x) ** 2
        grad = np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])
        return float(value), grad

    result = lbfgs_refine(rosenbrock, np.array([-1.2, 1.0]), max_iters=500)
    assert result.value < 1e-6
