"""Unit tests for the dense-net core: forward, gradients, AdamW, serialization."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from flowmi import nn
from flowmi.errors import ConfigError, NumericalError


def _loss_sq(target):
    def fn(out):
        r = out - target
        return float(np.sum(r * r)), 2.0 * r

    return fn


class TestForward:
    def test_zero_weights_give_activated_bias(self):
        b = np.array([0.3, -1.2])
        net = nn.DenseNet(
            weights=(np.zeros((2, 4)),), biases=(b,), activations=("tanh",)
        )
        out = nn.forward(net, np.array([5.0, -3.0, 2.0, 0.1]))
        assert_allclose(out, np.tanh(b), rtol=0, atol=0)

    def test_identity_layer_passes_input_through(self):
        net = nn.DenseNet(
            weights=(np.eye(3),), biases=(np.zeros(3),), activations=("identity",)
        )
        v = np.array([1.5, -2.0, 0.25])
        assert_allclose(nn.forward(net, v), v, rtol=0, atol=0)

    def test_matches_independent_reimplementation(self):
        rng = np.random.default_rng(123)
        net = nn.init_dense_net((4, 6, 2), ("tanh", "tanh"), rng)
        x = rng.standard_normal(4)

        # straightforward loop-based oracle
        h = x.copy()
        for w, b in zip(net.weights, net.biases):
            z = np.array([sum(w[i, j] * h[j] for j in range(len(h))) + b[i]
                          for i in range(w.shape[0])])
            h = np.tanh(z)
        assert_allclose(nn.forward(net, x), h, atol=1e-12, rtol=0)

    def test_dimension_mismatch_reports_shapes(self):
        rng = np.random.default_rng(0)
        net = nn.init_dense_net((4, 3), ("identity",), rng)
        with pytest.raises(ConfigError, match="shape"):
            nn.forward(net, np.zeros(5))

    def test_batch_and_single_agree(self):
        # same values up to BLAS summation order
        rng = np.random.default_rng(5)
        net = nn.init_dense_net((3, 8, 2), ("relu", "identity"), rng)
        xb = rng.standard_normal((10, 3))
        out = nn.forward(net, xb)
        for i in range(10):
            assert_allclose(nn.forward(net, xb[i]), out[i], atol=1e-14, rtol=1e-14)


class TestGradient:
    def test_constant_loss_gives_zero_gradients(self):
        rng = np.random.default_rng(1)
        net = nn.init_dense_net((3, 5, 2), ("tanh", "identity"), rng)
        val, g = nn.gradient(net, rng.standard_normal(3), lambda out: (1.0, np.zeros_like(out)))
        assert val == 1.0
        assert np.all(g == 0.0)

    def test_linear_layer_squared_error_closed_form(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal((3, 4))
        b = rng.standard_normal(3)
        net = nn.DenseNet((w.copy(),), (b.copy(),), ("identity",))
        x = rng.standard_normal(4)
        target = rng.standard_normal(3)
        _, g = nn.gradient(net, x, _loss_sq(target))
        resid = w @ x + b - target
        expected_w = 2.0 * np.outer(resid, x)
        expected_b = 2.0 * resid
        assert_allclose(g[: w.size].reshape(w.shape), expected_w, atol=1e-12)
        assert_allclose(g[w.size :], expected_b, atol=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_finite_difference_agreement(self, seed):
        rng = np.random.default_rng(seed)
        net = nn.init_dense_net((4, 10, 8, 2), ("tanh", "relu", "identity"), rng)
        x = rng.standard_normal((3, 4))
        target = rng.standard_normal((3, 2))
        _, g = nn.gradient(net, x, _loss_sq(target))
        p0 = nn.params_flat(net)
        h = 1e-5
        idx = rng.choice(p0.size, size=60, replace=False)
        for i in idx:
            pp, pm = p0.copy(), p0.copy()
            pp[i] += h
            pm[i] -= h
            lp = np.sum((nn.forward(nn.with_params(net, pp), x) - target) ** 2)
            lm = np.sum((nn.forward(nn.with_params(net, pm), x) - target) ** 2)
            fd = (lp - lm) / (2 * h)
            denom = max(abs(fd), abs(g[i]), 1e-8)
            assert abs(g[i] - fd) / denom < 1e-4

    def test_non_finite_loss_reports_batch_index(self):
        rng = np.random.default_rng(3)
        net = nn.init_dense_net((2, 2), ("identity",), rng)
        x = np.array([[0.0, 0.0], [np.inf, 1.0], [1.0, 1.0]])

        def bad_loss(out):
            return float(np.sum(out)), np.ones_like(out)

        with pytest.raises(NumericalError, match="batch index 1"):
            nn.gradient(net, x, bad_loss)


class TestAdamW:
    def _net(self, seed=0):
        return nn.init_dense_net((3, 4, 2), ("tanh", "identity"), np.random.default_rng(seed))

    def test_zero_grads_zero_decay_leaves_params(self):
        net = self._net()
        state = nn.init_optimizer(net.n_params, lr=0.1, weight_decay=0.0)
        net2, _ = nn.adamw_step(net, np.zeros(net.n_params), state)
        assert np.array_equal(nn.params_flat(net), nn.params_flat(net2))

    def test_zero_grads_decay_scales_params(self):
        net = self._net()
        lam, lr = 0.3, 0.05
        state = nn.init_optimizer(net.n_params, lr=lr, weight_decay=lam)
        net2, _ = nn.adamw_step(net, np.zeros(net.n_params), state)
        assert_allclose(nn.params_flat(net2), nn.params_flat(net) * (1 - lr * lam), rtol=0)

    def test_first_step_is_signed_update(self):
        net = self._net()
        g = np.random.default_rng(9).standard_normal(net.n_params)
        state = nn.init_optimizer(
            net.n_params, lr=0.01, weight_decay=0.0, eps=1e-300, clip_norm=None
        )
        net2, _ = nn.adamw_step(net, g, state)
        assert_allclose(
            nn.params_flat(net2) - nn.params_flat(net), -0.01 * np.sign(g), atol=1e-12
        )

    def test_rejects_nonpositive_lr(self):
        with pytest.raises(ConfigError, match="learning rate"):
            nn.init_optimizer(10, lr=0.0)
        state = nn.init_optimizer(10, lr=1.0)
        with pytest.raises(ConfigError, match="learning rate"):
            nn.adamw_flat(np.zeros(10), np.zeros(10), state, lr=-1.0)

    def test_rejects_non_finite_grads(self):
        state = nn.init_optimizer(3, lr=0.1)
        with pytest.raises(NumericalError, match="non-finite"):
            nn.adamw_flat(np.zeros(3), np.array([1.0, np.nan, 0.0]), state)

    def test_clipping_bounds_global_norm(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            g = rng.standard_normal(50) * rng.uniform(0.1, 100)
            bound = rng.uniform(0.01, 5.0)
            clipped, _ = nn.clip_global_norm(g, bound)
            assert np.linalg.norm(clipped) <= bound + 1e-12

    def test_training_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(77)
            net = nn.init_dense_net((3, 8, 2), ("tanh", "identity"), rng)
            state = nn.init_optimizer(net.n_params, lr=1e-2)
            for _ in range(25):
                x = rng.standard_normal((4, 3))
                target = rng.standard_normal((4, 2))
                _, g = nn.gradient(net, x, _loss_sq(target))
                net, state = nn.adamw_step(net, g, state)
            return nn.params_flat(net)

        a, b = run(), run()
        assert np.array_equal(a, b)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(21)
        net = nn.init_dense_net((5, 16, 4), ("relu", "identity"), rng)
        path = tmp_path / "net.json"
        nn.save_net(net, path, rng_seed=21)
        net2 = nn.load_net(path)
        assert net.activations == net2.activations
        assert np.array_equal(nn.params_flat(net), nn.params_flat(net2))

    def test_rejects_unknown_version(self):
        doc = nn.net_to_dict(
            nn.init_dense_net((2, 2), ("identity",), np.random.default_rng(0))
        )
        doc["format_version"] = 999
        with pytest.raises(ConfigError, match="format_version"):
            nn.net_from_dict(doc)
