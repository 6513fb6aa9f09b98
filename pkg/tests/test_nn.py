import numpy as np
import pytest

from kaminor.exterior import minors
from kaminor.nn import (
    MLP,
    MLPConfig,
    activation_derivative,
    forward,
    finite_diff_jacobian,
    init_mlp,
    jacobian_between,
    layer_jacobian,
    loss_and_gradients,
    mse,
    predict,
    train_sgd,
    xavier_bound,
)


def make_net(sizes, acts, seed=0):
    return init_mlp(MLPConfig(sizes, acts, seed=seed))


class TestConfig:
    @pytest.mark.parametrize(
        "sizes, acts",
        [([3], []), ([3, 0, 2], ["tanh", "tanh"]), ([3, 2], ["tanh", "tanh"]), ([3, 2], ["relu"])],
    )
    def test_invalid(self, sizes, acts):
        with pytest.raises(ValueError):
            MLPConfig(sizes, acts)

    def test_bad_init_scheme(self):
        with pytest.raises(ValueError):
            MLPConfig([2, 2], ["tanh"], init_scheme="he")


class TestInit:
    def test_shapes(self):
        net = make_net([3, 4, 2], ["tanh", "identity"])
        assert [W.shape for W in net.weights] == [(4, 3), (2, 4)]
        assert all(not b.any() for b in net.biases)

    def test_deterministic(self):
        a = make_net([3, 4, 2], ["tanh", "identity"], seed=5)
        b = make_net([3, 4, 2], ["tanh", "identity"], seed=5)
        c = make_net([3, 4, 2], ["tanh", "identity"], seed=6)
        for Wa, Wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(Wa, Wb)
        assert not np.array_equal(a.weights[0], c.weights[0])

    def test_xavier_bound_respected(self):
        bound = xavier_bound(3, 5)
        assert bound == pytest.approx(np.sqrt(6 / 8))
        extreme = 0.0
        for seed in range(1000):
            W = make_net([3, 5], ["identity"], seed=seed).weights[0]
            extreme = max(extreme, np.abs(W).max())
        assert extreme <= bound
        # uniform draws should come close to the edge over 15000 samples
        assert extreme > 0.99 * bound


class TestForward:
    def test_manual_arithmetic(self):
        cfg = MLPConfig([2, 2, 1], ["tanh", "identity"])
        W1 = np.array([[0.5, -1.0], [2.0, 0.25]])
        b1 = np.array([0.1, -0.2])
        W2 = np.array([[1.5, -0.5]])
        b2 = np.array([0.3])
        net = MLP([W1, W2], [b1, b2], cfg)
        x = np.array([0.4, -0.6])
        h0 = np.tanh(0.5 * 0.4 + (-1.0) * (-0.6) + 0.1)
        h1 = np.tanh(2.0 * 0.4 + 0.25 * (-0.6) - 0.2)
        out = 1.5 * h0 - 0.5 * h1 + 0.3
        tr = forward(net, x)
        assert tr.output[0] == pytest.approx(out, abs=1e-15)
        assert predict(net, [x])[0, 0] == pytest.approx(out, abs=1e-15)

    def test_softplus_stable(self):
        net = MLP([np.array([[1.0]])], [np.zeros(1)], MLPConfig([1, 1], ["softplus"]))
        assert forward(net, [800.0]).output[0] == pytest.approx(800.0)
        assert forward(net, [-800.0]).output[0] == pytest.approx(0.0, abs=1e-300)
        assert forward(net, [0.0]).output[0] == pytest.approx(np.log(2.0))

    def test_wrong_input_shape(self):
        with pytest.raises(ValueError):
            forward(make_net([3, 2], ["tanh"]), [1.0, 2.0])


class TestLayerJacobian:
    def test_identity_layer_is_weight_transpose(self):
        net = make_net([3, 4], ["identity"], seed=1)
        J = layer_jacobian(net, forward(net, np.ones(3)), 1)
        np.testing.assert_array_equal(J, net.weights[0].T)

    def test_tanh_at_zero_preactivation(self):
        net = make_net([2, 3], ["tanh"], seed=2)
        J = jacobian_between(net, np.zeros(2), 0, 1)
        np.testing.assert_allclose(J, net.weights[0].T, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("kind", ["tanh", "softplus", "identity"])
    def test_activation_derivative_matches_fd(self, kind):
        from kaminor.nn import activate

        z = np.linspace(-4, 4, 41)
        h = 1e-6
        fd = (activate(kind, z + h) - activate(kind, z - h)) / (2 * h)
        np.testing.assert_allclose(activation_derivative(kind, z), fd, atol=1e-9)

    def test_out_of_range(self):
        net = make_net([2, 2], ["tanh"])
        with pytest.raises(ValueError):
            layer_jacobian(net, forward(net, np.zeros(2)), 2)
        with pytest.raises(ValueError):
            jacobian_between(net, np.zeros(2), 1, 1)


class TestJacobianComposition:
    def test_chain_rule(self):
        net = make_net([3, 5, 4, 2], ["tanh", "softplus", "tanh"], seed=3)
        x = np.array([0.3, -0.7, 1.1])
        tr = forward(net, x)
        J02 = jacobian_between(net, x, 0, 2, tr)
        J23 = jacobian_between(net, x, 2, 3, tr)
        np.testing.assert_allclose(jacobian_between(net, x, 0, 3, tr), J02 @ J23, rtol=1e-10, atol=1e-14)

    def test_chain_rule_at_minor_level(self):
        net = make_net([4, 5, 4], ["tanh", "softplus"], seed=4)
        x = np.array([0.1, 0.2, -0.3, 0.4])
        J01 = jacobian_between(net, x, 0, 1)
        J12 = jacobian_between(net, x, 1, 2)
        left = minors(J01 @ J12, 2).values
        right = minors(J01, 2).values @ minors(J12, 2).values
        np.testing.assert_allclose(left, right, rtol=1e-10, atol=1e-13)

    def test_matches_finite_differences(self):
        net = make_net([3, 6, 5, 2], ["tanh", "softplus", "tanh"], seed=5)
        x = np.array([0.5, -0.2, 0.9])
        for i, j in [(0, 1), (0, 3), (1, 3), (2, 3)]:
            J = jacobian_between(net, x, i, j)
            fd = finite_diff_jacobian(net, x, i, j)
            assert np.abs(J - fd).max() <= 1e-5 * max(1.0, np.abs(J).max())

    def test_fd_error_is_second_order(self):
        net = make_net([2, 4, 3], ["tanh", "tanh"], seed=6)
        x = np.array([0.7, -0.4])
        J = jacobian_between(net, x, 0, 2)
        errs = [np.abs(finite_diff_jacobian(net, x, 0, 2, step=s) - J).max() for s in (1e-2, 5e-3)]
        assert 3.0 < errs[0] / errs[1] < 5.0

    def test_fd_step_positive(self):
        net = make_net([2, 2], ["tanh"])
        with pytest.raises(ValueError):
            finite_diff_jacobian(net, np.zeros(2), 0, 1, step=0.0)


class TestTraining:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.X = rng.uniform(-1, 1, (32, 3))
        self.A = np.array([[1.0, -2.0], [0.5, 0.25], [-1.0, 1.5]])
        self.Y = self.X @ self.A

    def test_gradients_match_fd(self):
        net = make_net([3, 4, 2], ["tanh", "identity"], seed=7)
        _, gw, gb = loss_and_gradients(net, self.X, self.Y)
        h = 1e-6
        for layer in range(2):
            for idx in [(0, 0), (1, 2)]:
                W = net.weights[layer]
                w0 = W[idx]
                W[idx] = w0 + h
                up = mse(net, self.X, self.Y)
                W[idx] = w0 - h
                down = mse(net, self.X, self.Y)
                W[idx] = w0
                assert gw[layer][idx] == pytest.approx((up - down) / (2 * h), rel=1e-6, abs=1e-9)
            b = net.biases[layer]
            b[0] += h
            up = mse(net, self.X, self.Y)
            b[0] -= 2 * h
            down = mse(net, self.X, self.Y)
            b[0] += h
            assert gb[layer][0] == pytest.approx((up - down) / (2 * h), rel=1e-6, abs=1e-9)

    def test_zero_learning_rate_leaves_weights(self):
        net = make_net([3, 4, 2], ["tanh", "identity"], seed=1)
        before = net.copy()
        hist = train_sgd(net, self.X, self.Y, epochs=5, lr=0.0)
        assert len(hist) == 5 and len(set(hist)) == 1
        for a, b in zip(net.weights, before.weights):
            np.testing.assert_array_equal(a, b)

    def test_linear_regression_converges(self):
        net = make_net([3, 2], ["identity"], seed=2)
        train_sgd(net, self.X, self.Y, epochs=500, lr=0.1)
        assert mse(net, self.X, self.Y) < 1e-6

    def test_deterministic_minibatches(self):
        a = make_net([3, 4, 2], ["tanh", "identity"], seed=3)
        b = a.copy()
        ha = train_sgd(a, self.X, self.Y, epochs=10, lr=0.05, seed=9, batch_size=8)
        hb = train_sgd(b, self.X, self.Y, epochs=10, lr=0.05, seed=9, batch_size=8)
        assert ha == hb
        np.testing.assert_array_equal(a.weights[0], b.weights[0])

    def test_unsupported_loss(self):
        with pytest.raises(ValueError):
            train_sgd(make_net([3, 2], ["identity"]), self.X, self.Y, 1, 0.1, loss="xent")

    def test_dataset_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse(make_net([2, 2], ["identity"]), self.X, self.Y)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = make_net([3, 4, 2], ["softplus", "tanh"], seed=11)
        path = tmp_path / "net.json"
        net.save(path)
        back = MLP.load(path)
        assert back.config == net.config
        for a, b in zip(back.weights + back.biases, net.weights + net.biases):
            np.testing.assert_array_equal(a, b)
        x = np.array([0.2, 0.1, -0.5])
        np.testing.assert_array_equal(forward(back, x).output, forward(net, x).output)

    def test_keys(self):
        d = make_net([2, 2], ["tanh"]).to_dict()
        assert {"layerSizes", "activationKinds", "initScheme", "seed", "weights", "biases"} <= set(d)
