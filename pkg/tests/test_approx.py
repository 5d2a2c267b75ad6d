import math

import numpy as np
import pytest

from ctdl import approx
from ctdl.errors import ConfigurationError, NumericalError


def ref_forward(net, x):
    """Plain numpy forward pass built from the per-layer views, used as the oracle."""
    h = np.asarray(x, dtype=float)
    for l in range(net.n_layers):
        h = net.weights(l) @ h + net.biases(l)
        if l < net.n_layers - 1:
            h = np.maximum(h, 0.0) if net.activation == "relu" else np.tanh(h)
    return h


def fd_grad(f, params, h=1e-5):
    g = np.zeros_like(params)
    for k in range(params.size):
        old = params[k]
        params[k] = old + h
        up = f()
        params[k] = old - h
        down = f()
        params[k] = old
        g[k] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_net(rng, activation):
    depth = int(rng.integers(1, 4))
    sizes = [int(rng.integers(1, 5)) for _ in range(depth + 1)]
    return approx.net_init(sizes, rng, activation)


def safe_input(net, rng):
    # keep every relu pre-activation away from its kink so central differences are valid
    for _ in range(100):
        x = rng.normal(size=net.sizes[0])
        h, ok = x, True
        for l in range(net.n_layers - 1):
            z = net.weights(l) @ h + net.biases(l)
            ok &= bool(np.all(np.abs(z) > 1e-3))
            h = np.maximum(z, 0) if net.activation == "relu" else np.tanh(z)
        if ok:
            return x
    pytest.skip("could not find a kink-free input")


def test_init_shapes_and_determinism():
    a = approx.net_init([2, 4, 1], np.random.default_rng(0))
    b = approx.net_init([2, 4, 1], np.random.default_rng(0))
    assert a.weights(0).shape == (4, 2) and a.weights(1).shape == (1, 4)
    assert np.array_equal(a.params, b.params)
    assert not a.biases(0).any() and not a.biases(1).any()


@pytest.mark.parametrize("sizes", [[2], [], [2, 0, 1]])
def test_init_rejects_bad_sizes(sizes):
    with pytest.raises(ConfigurationError):
        approx.net_init(sizes, np.random.default_rng(0))


def test_zero_network_outputs_zero():
    net = approx.Network((2, 3, 2), np.zeros(approx.n_params((2, 3, 2))))
    assert approx.net_forward(net, [0.3, -2.0]).tolist() == [0.0, 0.0]


def test_linear_layer_hand_multiply():
    net = approx.Network((2, 2), np.zeros(6))
    net.weights(0)[...] = [[1, 2], [3, 4]]
    net.biases(0)[...] = [0.5, -0.5]
    assert approx.net_forward(net, [1, 1]).tolist() == [3.5, 6.5]


def test_identity_hidden_layer_rectifies():
    net = approx.Network((2, 2, 2), np.zeros(12))
    net.weights(0)[...] = np.eye(2)
    net.weights(1)[...] = np.eye(2)
    assert approx.net_forward(net, [0.7, -0.3]).tolist() == [0.7, 0.0]


def test_forward_dimension_mismatch():
    net = approx.net_init([2, 3, 1], np.random.default_rng(0))
    with pytest.raises(TypeError):
        approx.net_forward(net, [1.0, 2.0, 3.0])


def test_forward_is_pure():
    net = approx.net_init([2, 8, 3], np.random.default_rng(1))
    before = net.params.copy()
    a = approx.net_forward(net, [0.2, 0.4])
    b = approx.net_forward(net, [0.2, 0.4])
    assert np.array_equal(a, b) and np.array_equal(before, net.params)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_forward_matches_numpy_reference(activation):
    rng = np.random.default_rng(2)
    for _ in range(20):
        net = random_net(rng, activation)
        x = rng.normal(size=net.sizes[0])
        np.testing.assert_allclose(approx.net_forward(net, x), ref_forward(net, x), rtol=1e-12, atol=1e-12)


def test_td_step_zero_delta_no_change():
    net = approx.net_init([2, 4, 2], np.random.default_rng(0))
    opt = approx.optimizer_for(net)
    before = net.params.copy()
    approx.net_td_step(net, opt, [0.1, 0.2], 1, 0.0)
    assert np.array_equal(before, net.params)


def test_td_step_single_weight_sgd():
    net = approx.Network((1, 1), np.array([0.3, 0.0]))
    opt = approx.optimizer_for(net, "sgd", 0.1)
    approx.net_td_step(net, opt, [1.0], 0, 1.0)
    assert net.weights(0)[0, 0] == pytest.approx(0.4)


def test_td_step_nonfinite_delta():
    net = approx.net_init([2, 4, 2], np.random.default_rng(0))
    opt = approx.optimizer_for(net)
    before = net.params.copy()
    with pytest.raises(NumericalError):
        approx.net_td_step(net, opt, [0.1, 0.2], 0, float("nan"))
    assert np.array_equal(before, net.params) and opt.t == 0


def test_td_step_bad_output_index():
    net = approx.net_init([2, 4, 2], np.random.default_rng(0))
    with pytest.raises(IndexError):
        approx.net_td_step(net, approx.optimizer_for(net), [0.1, 0.2], 2, 1.0)


def test_td_gradient_only_touches_chosen_output():
    net = approx.net_init([2, 3, 2], np.random.default_rng(5))
    g = approx.td_gradient(net, [0.5, 0.5], 0, 1.0)
    last_w = g[approx.n_params((2, 3)):].copy()
    # row 1 of the output weights and output bias 1 belong to the other head
    assert not last_w[3:6].any() and last_w[7] == 0.0


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_vjp_matches_finite_differences(activation):
    rng = np.random.default_rng(10 if activation == "relu" else 11)
    for _ in range(25):
        net = random_net(rng, activation)
        x = safe_input(net, rng)
        dout = rng.normal(size=net.sizes[-1])
        _, g = approx.value_and_vjp(net, x, dout)
        num = fd_grad(lambda: float(dout @ ref_forward(net, x)), net.params)
        assert rel_err(g, num).max() < 1e-4


def test_policy_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(10):
        net = approx.net_init([2, 5, 2], rng, "tanh")
        net.biases(1)[1] = rng.uniform(-1, 0.5)  # log_std inside its clamp range
        x, a, adv = rng.normal(size=2), rng.normal(size=1), rng.normal()
        g = approx.policy_gradient(net, x, a, adv)
        num = fd_grad(lambda: -adv * approx.gaussian_log_prob(ref_forward(net, x), a), net.params)
        assert rel_err(g, num).max() < 1e-4


def test_policy_gradient_hand_computed_head():
    # output layer only: out = b, so d/d(mean) and d/d(log_std) of -A log N are closed form
    net = approx.Network((1, 2), np.array([0.0, 0.0, 0.2, -0.5]))
    a, adv = 0.7, 1.5
    mean, log_std = 0.2, -0.5
    std = math.exp(log_std)
    z = (a - mean) / std
    g = approx.policy_gradient(net, [0.0], [a], adv)
    assert g[2] == pytest.approx(-adv * z / std)
    assert g[3] == pytest.approx(-adv * (z * z - 1))


def test_policy_gradient_zero_at_mean():
    net = approx.net_init([2, 4, 2], np.random.default_rng(4))
    x = np.array([0.3, 0.6])
    mean = approx.net_forward(net, x)[0]
    g = approx.policy_gradient(net, x, [mean], 2.0)
    # z = 0, so only the log_std head contributes: d/d(log_std) = -A * (0 - 1) = A
    expected = approx.value_and_vjp(net, x, np.array([0.0, 2.0]))[1]
    assert np.allclose(g, expected, rtol=0, atol=1e-15)


def test_policy_step_zero_and_nonfinite_advantage():
    net = approx.net_init([2, 4, 2], np.random.default_rng(0))
    opt = approx.optimizer_for(net)
    before = net.params.copy()
    approx.net_policy_step(net, opt, [0.1, 0.2], [0.3], 0.0)
    assert np.array_equal(before, net.params)
    with pytest.raises(NumericalError):
        approx.net_policy_step(net, opt, [0.1, 0.2], [0.3], float("inf"))
    assert np.array_equal(before, net.params)


def test_log_std_clamped_and_no_gradient_outside():
    net = approx.Network((1, 2), np.array([0.0, 0.0, 0.0, 5.0]))
    _, log_std, std = approx.gaussian_head(approx.net_forward(net, [0.0]))
    assert log_std[0] == approx.LOG_STD_MAX and std[0] == pytest.approx(math.e)
    g = approx.policy_gradient(net, [0.0], [0.5], 1.0)
    assert g[3] == 0.0


def test_sgd_monotone_on_quadratic():
    # fit a linear unit to a fixed target; lr well below 2/||x||^2
    net = approx.Network((2, 1), np.array([0.5, -0.3, 0.1]))
    opt = approx.optimizer_for(net, "sgd", 0.05)
    x, target = np.array([1.0, 2.0]), 3.0
    losses = []
    for _ in range(500):
        out = approx.net_forward(net, x)[0]
        losses.append(0.5 * (target - out) ** 2)
        approx.net_td_step(net, opt, x, 0, target - out)
    assert all(b <= a for a, b in zip(losses[1:], losses[2:]))
    assert losses[-1] < 1e-10


def test_adam_converges_and_is_deterministic():
    def run():
        net = approx.net_init([2, 8, 1], np.random.default_rng(7))
        opt = approx.optimizer_for(net, "adam", 1e-2)
        for _ in range(300):
            out = approx.net_forward(net, [0.4, 0.9])[0]
            approx.net_td_step(net, opt, [0.4, 0.9], 0, 1.0 - out)
        return net
    a, b = run(), run()
    assert np.array_equal(a.params, b.params)
    assert approx.net_forward(a, [0.4, 0.9])[0] == pytest.approx(1.0, abs=1e-3)


def test_checkpoint_roundtrip(tmp_path):
    net = approx.net_init([2, 6, 3], np.random.default_rng(0), "tanh")
    approx.save_network(net, tmp_path / "n.json")
    back = approx.load_network(tmp_path / "n.json")
    assert back.sizes == net.sizes and back.activation == "tanh"
    assert np.array_equal(back.params, net.params)


def test_checkpoint_version_checked():
    from ctdl.errors import UnsupportedVersionError
    d = approx.net_init([2, 1], np.random.default_rng(0)).to_dict()
    d["version"] = 99
    with pytest.raises(UnsupportedVersionError):
        approx.Network.from_dict(d)
