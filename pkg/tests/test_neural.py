import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopsignal.neural import (
    Adam,
    DenseNet,
    GradientTape,
    backward,
    forward,
    load_net,
    save_net,
    sgd_update,
)


def numeric_grads(net, x, loss, eps=1e-5):
    out = []
    for p in net.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = loss(net(x))
            p[idx] = old - eps
            down = loss(net(x))
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return np.concatenate([g.ravel() for g in out])


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def check_gradients(net, x, rng):
    target = rng.normal(size=(x.shape[0], net.n_out))
    loss = lambda y: 0.5 * float(np.sum((y - target) ** 2))  # noqa: E731
    y, cache = net.forward(x)
    tape = net.backward(cache, y - target)
    return rel_err(tape.flat(), numeric_grads(net, x, loss))


def test_forward_zero_net():
    net = DenseNet([3, 4, 4, 2], "tanh")
    for p in net.parameters():
        p[...] = 0
    assert np.all(net(np.ones(3)) == 0)


def test_forward_composition():
    net = DenseNet([1, 1, 1], "tanh")
    for p in net.weights:
        p[...] = 1
    for p in net.biases:
        p[...] = 0
    assert net(np.array([0.5]))[0] == pytest.approx(np.tanh(np.tanh(0.5)), abs=1e-12)
    assert net(np.array([0.5]))[0] == pytest.approx(0.4318082, abs=1e-7)


def test_constant_bias_output():
    net = DenseNet([2, 3, 2], "linear")
    net.weights[0][...] = 0
    net.weights[1][...] = 0
    net.biases[1][...] = [0.3, -0.7]
    for x in np.random.default_rng(0).normal(size=(5, 2)):
        np.testing.assert_array_equal(net(x), [0.3, -0.7])


def test_dimension_mismatch():
    net = DenseNet([3, 4, 1])
    with pytest.raises(ValueError):
        forward(net, np.ones(4))


def test_linear_gradient_by_hand():
    net = DenseNet([3, 1], "linear")
    x = np.array([0.2, -1.0, 0.5])
    target = 0.7
    y, cache = net.forward(x)
    tape = backward(net, cache, 2 * (y - target))
    np.testing.assert_allclose(tape.weights[0][:, 0], 2 * (y[0] - target) * x)
    np.testing.assert_allclose(tape.biases[0], 2 * (y - target))


def test_zero_loss_gradient():
    net = DenseNet([3, 5, 5, 2])
    y, cache = net.forward(np.ones(3))
    tape = net.backward(cache, np.zeros(2))
    assert not tape.flat().any()


def test_segmented_head_bounds():
    net = DenseNet([4, 8, 8, 6], [("tanh", 3), ("logistic", 3)], seed=1)
    for p in net.parameters():
        p *= 50
    y = net(np.random.default_rng(2).normal(size=(200, 4)))
    assert np.all(np.abs(y[:, :3]) <= 1)
    assert np.all((y[:, 3:] >= 0) & (y[:, 3:] <= 1))


@pytest.mark.parametrize("sizes,head", [
    ([5, 64, 64, 1], "tanh"),
    ([7, 64, 64, 1], "linear"),
    ([5, 16, 16, 4], [("tanh", 2), ("logistic", 2)]),
])
def test_agent_shaped_gradients(sizes, head):
    rng = np.random.default_rng(0)
    net = DenseNet(sizes, head, seed=3)
    x = rng.uniform(-1, 1, size=(3, sizes[0]))
    assert check_gradients(net, x, rng) <= 1e-4


@settings(max_examples=25, deadline=None)
@given(
    widths=st.lists(st.integers(1, 6), min_size=2, max_size=4),
    seed=st.integers(0, 2**16),
    batch=st.integers(1, 3),
)
def test_random_gradients(widths, seed, batch):
    rng = np.random.default_rng(seed)
    net = DenseNet(widths, "tanh", seed=seed)
    x = rng.uniform(-1, 1, size=(batch, widths[0]))
    assert check_gradients(net, x, rng) <= 1e-4


def test_input_gradient():
    rng = np.random.default_rng(4)
    net = DenseNet([4, 6, 6, 1], "linear", seed=4)
    x = rng.uniform(-1, 1, size=4)
    _, cache = net.forward(x)
    analytic = net.backward(cache, np.ones(1)).inputs
    eps = 1e-6
    numeric = np.array([(net(x + eps * e)[0] - net(x - eps * e)[0]) / (2 * eps) for e in np.eye(4)])
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)


def test_sgd_examples():
    net = DenseNet([1, 1], "linear")
    net.weights[0][...] = 1.0
    net.biases[0][...] = 0.0
    tape = GradientTape([np.array([[0.5]])], [np.array([0.0])])
    assert sgd_update(net, tape, 0.1)
    assert net.weights[0][0, 0] == pytest.approx(0.95)

    before = [p.copy() for p in net.parameters()]
    sgd_update(net, tape, 0.0)
    for a, b in zip(before, net.parameters()):
        np.testing.assert_array_equal(a, b)


def test_sgd_rejects_non_finite():
    net = DenseNet([2, 2], "linear")
    before = [p.copy() for p in net.parameters()]
    tape = GradientTape([np.array([[np.nan, 0], [0, 0]])], [np.zeros(2)])
    assert not sgd_update(net, tape, 0.1)
    assert not Adam(net, 0.1).step(net, tape)
    for a, b in zip(before, net.parameters()):
        np.testing.assert_array_equal(a, b)


def test_sequential_updates_commute_with_summed_update():
    rng = np.random.default_rng(5)
    a = DenseNet([3, 2], "linear", seed=5)
    b = a.copy()
    t1 = GradientTape([rng.normal(size=(3, 2))], [rng.normal(size=2)])
    t2 = GradientTape([rng.normal(size=(3, 2))], [rng.normal(size=2)])
    sgd_update(a, t1, 0.1)
    sgd_update(a, t2, 0.1)
    sgd_update(b, t1 + t2, 0.1)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_allclose(p, q, atol=1e-15)


def test_forward_deterministic():
    x = np.linspace(-1, 1, 5)
    assert np.array_equal(DenseNet([5, 8, 8, 2], seed=9)(x), DenseNet([5, 8, 8, 2], seed=9)(x))


def test_checkpoint_round_trip(tmp_path):
    net = DenseNet([4, 7, 7, 6], [("tanh", 3), ("logistic", 3)], seed=11)
    save_net(net, tmp_path / "n.json")
    back = load_net(tmp_path / "n.json")
    for p, q in zip(net.parameters(), back.parameters()):
        np.testing.assert_array_equal(p, q)
    assert back.head == net.head
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(net(x), back(x))


def test_checkpoint_version_checked(tmp_path):
    data = DenseNet([2, 2]).to_dict()
    data["version"] = 99
    (tmp_path / "n.json").write_text(json.dumps(data))
    with pytest.raises(ValueError):
        load_net(tmp_path / "n.json")
