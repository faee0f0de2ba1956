"""Tests for CFM training, CFG combination and Euler sampling."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from flowmi import nn
from flowmi.errors import ConfigError, NumericalError
from flowmi.flow import (
    ContinuousCodec,
    DiscreteCodec,
    FlowModel,
    N_TIME_FEATURES,
    TrainConfig,
    _cfm_loss_grads,
    cfm_loss,
    combined_velocity,
    draw_null_mask,
    euler_sample,
    euler_sample_batch,
    load_model,
    model_from_dict,
    model_to_dict,
    path_point,
    save_model,
    train_flow,
)
from flowmi.mi import AnalyticGaussianTask
from flowmi.seeding import substream


def _const_model(d=2, value=None, n_values=2, embed_dim=3, p_uncond=0.1):
    """Flow model whose net has zero weights; output is exactly the bias."""
    rng = np.random.default_rng(0)
    codec = DiscreteCodec(
        values=tuple(range(n_values)),
        embedding=0.1 * rng.standard_normal((n_values, embed_dim)),
        null=0.1 * rng.standard_normal(embed_dim),
    )
    in_dim = d + embed_dim + N_TIME_FEATURES
    bias = np.zeros(d) if value is None else np.asarray(value, dtype=np.float64)
    net = nn.DenseNet(
        weights=(np.zeros((d, in_dim)),), biases=(bias,), activations=("identity",)
    )
    return FlowModel(net=net, codec=codec, data_dim=d, p_uncond=p_uncond)


def _random_model(d=2, n_values=3, embed_dim=4, hidden=(16, 16), seed=0):
    rng = np.random.default_rng(seed)
    codec = DiscreteCodec(
        values=tuple(range(n_values)),
        embedding=0.3 * rng.standard_normal((n_values, embed_dim)),
        null=0.3 * rng.standard_normal(embed_dim),
    )
    in_dim = d + embed_dim + N_TIME_FEATURES
    net = nn.init_dense_net(
        (in_dim,) + hidden + (d,), ("tanh",) * len(hidden) + ("identity",), rng
    )
    return FlowModel(net=net, codec=codec, data_dim=d, p_uncond=0.1)


class TestPathAndLoss:
    def test_path_point_identity_spot_checks(self):
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal((20, 3))
        x1 = rng.standard_normal((20, 3))
        t = rng.uniform(0, 1, 20)
        xt = path_point(x0, x1, t)
        for i in (0, 7, 19):
            assert_allclose(xt[i], t[i] * x1[i] + (1 - t[i]) * x0[i], atol=0, rtol=0)

    def test_exact_model_gives_zero_loss(self):
        # single pair: net bias equals x1 - x0, so the residual vanishes
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal((1, 2))
        x1 = rng.standard_normal((1, 2))
        model = _const_model(d=2, value=(x1 - x0)[0])
        loss = cfm_loss(model, x0, x1, np.array([0]), np.array([0.4]))
        assert loss == 0.0

    def test_zero_model_loss_is_mean_square_target(self):
        rng = np.random.default_rng(2)
        x0 = rng.standard_normal((64, 2))
        x1 = rng.standard_normal((64, 2))
        y = rng.integers(0, 2, 64)
        t = rng.uniform(0, 1, 64)
        model = _const_model(d=2)
        loss = cfm_loss(model, x0, x1, y, t)
        assert_allclose(loss, np.mean(np.sum((x1 - x0) ** 2, axis=1)), rtol=1e-14)

    def test_rejects_t_outside_unit_interval(self):
        model = _const_model()
        x = np.zeros((2, 2))
        with pytest.raises(ConfigError, match="0, 1"):
            cfm_loss(model, x, x, np.array([0, 1]), np.array([0.5, 1.0]))

    def test_masking_rate_within_band(self):
        rng = np.random.default_rng(123)
        mask = draw_null_mask(rng, 100_000, 0.1)
        assert 0.09 <= mask.mean() <= 0.11

    @pytest.mark.parametrize("codec_kind", ["discrete", "continuous"])
    def test_loss_gradients_match_finite_differences(self, codec_kind):
        rng = np.random.default_rng(8)
        d, e = 2, 3
        if codec_kind == "discrete":
            model = _random_model(d=d, embed_dim=e, hidden=(8,), seed=8)
            y = rng.integers(0, 3, 6)
        else:
            codec = ContinuousCodec(
                weight=0.5 * rng.standard_normal((e, 2)),
                bias=0.1 * rng.standard_normal(e),
                null=0.3 * rng.standard_normal(e),
            )
            in_dim = d + e + N_TIME_FEATURES
            net = nn.init_dense_net((in_dim, 8, d), ("tanh", "identity"), rng)
            model = FlowModel(net=net, codec=codec, data_dim=d, p_uncond=0.1)
            y = rng.standard_normal((6, 2))
        x0 = rng.standard_normal((6, d))
        x1 = rng.standard_normal((6, d))
        t = rng.uniform(0, 1, 6)
        mask = np.array([False, True, False, False, True, False])
        _, grads = _cfm_loss_grads(model, x0, x1, y, t, mask)
        p0 = model.params
        h = 1e-6
        idx = rng.choice(p0.size, size=50, replace=False)
        for i in idx:
            pp, pm = p0.copy(), p0.copy()
            pp[i] += h
            pm[i] -= h
            lp, _ = _cfm_loss_grads(model.with_params(pp), x0, x1, y, t, mask)
            lm, _ = _cfm_loss_grads(model.with_params(pm), x0, x1, y, t, mask)
            fd = (lp - lm) / (2 * h)
            assert abs(grads[i] - fd) / max(abs(fd), abs(grads[i]), 1e-6) < 1e-4


class TestCfgVelocity:
    def test_w_one_is_guided(self):
        model = _random_model(seed=3)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 2))
        assert_allclose(
            model.cfg_velocity(x, 1, 0.3),
            model.guided_velocity(x, 1, 0.3),
            atol=0, rtol=0,
        )

    def test_w_zero_is_unconditional(self):
        model = _random_model(seed=4)
        x = np.random.default_rng(4).standard_normal((5, 2))
        assert_allclose(
            model.cfg_velocity(x, 0, 0.6),
            model.unconditional_velocity(x, 0.6),
            atol=0, rtol=0,
        )

    def test_w_two_matches_direct_recomputation(self):
        model = _random_model(seed=5)
        x = np.random.default_rng(5).standard_normal((5, 2))
        u_y = model.guided_velocity(x, 2, 0.25)
        u_0 = model.unconditional_velocity(x, 0.25)
        assert_allclose(model.cfg_velocity(x, 2, 0.25, 2.0), 2 * u_y - u_0, atol=1e-12)

    def test_rejects_negative_scale(self):
        model = _random_model(seed=6)
        with pytest.raises(ConfigError, match="guidance"):
            model.cfg_velocity(np.zeros((1, 2)), 0, 0.5, -0.5)

    @given(
        st.floats(min_value=0.0, max_value=4.0),
        st.floats(min_value=0.0, max_value=4.0),
    )
    @settings(deadline=None, max_examples=50)
    def test_affine_identity_in_w(self, w1, w2):
        model = _random_model(seed=7)
        x = np.random.default_rng(7).standard_normal((3, 2))
        u = lambda w: model.cfg_velocity(x, 1, 0.4, w)
        assert_allclose(u(w1) + u(w2) - u(0.0), u(w1 + w2), atol=1e-12)

    def test_cfg_velocity_method_matches_module_function(self):
        model = _random_model(seed=8)
        x = np.random.default_rng(8).standard_normal((4, 2))
        assert_allclose(
            model.cfg_velocity(x, 0, 0.2, 3.0),
            combined_velocity(model, x, 0, 0.2, 3.0),
            atol=0, rtol=0,
        )


class TestEulerSampler:
    def test_constant_field_translates_by_velocity(self):
        c = np.array([0.7, -1.1])
        model = _const_model(d=2, value=c)
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal((8, 2))
        for steps in (1, 3, 50):
            out = euler_sample_batch(model, 0, 8, steps, w=1.0, x0=x0)
            assert_allclose(out, x0 + c, atol=1e-12)

    def test_single_step_definition(self):
        model = _random_model(seed=9)
        x0 = np.random.default_rng(9).standard_normal(2)
        out = euler_sample(model, 1, steps=1, w=1.0, x0=x0)
        assert_allclose(out, x0 + model.guided_velocity(x0, 1, 0.0), atol=1e-14)

    def test_rejects_zero_steps(self):
        model = _const_model()
        with pytest.raises(ConfigError, match="steps"):
            euler_sample_batch(model, 0, 1, 0, rng=np.random.default_rng(0))

    def test_analytic_velocity_endpoint_moments(self):
        # exact velocity field transports the source onto the target; the
        # endpoint mean must land within 3 standard errors of the target mean
        task = AnalyticGaussianTask(means=np.array([[1.3]]), sigma2=0.49)
        rng = np.random.default_rng(10)
        out = euler_sample_batch(task, 0, 2000, 1000, w=1.0, rng=rng)
        se = np.sqrt(0.49 / 2000)
        assert abs(out.mean() - 1.3) < 3 * se + 5e-3  # small Euler bias allowance

    def test_non_finite_state_reports_step(self):
        model = _const_model(d=1, value=[np.inf])
        with pytest.raises(NumericalError, match="step 0"):
            euler_sample_batch(model, 0, 1, 4, rng=np.random.default_rng(0))


class _PointMassTask:
    """Degenerate sampler: the target is always the same point."""

    data_dim = 1
    condition_values = (0,)

    def __init__(self, c):
        self.c = c

    def sample_joint(self, rng, n):
        return np.full((n, 1), self.c), np.zeros(n, dtype=int)


class TestTrainFlow:
    def test_smoothed_loss_decreases(self):
        task = AnalyticGaussianTask(means=np.array([[-1.0], [1.0]]), sigma2=1.0)
        cfg = TrainConfig(iterations=600, batch_size=128, hidden=(32, 32), seed=0,
                          warmup_steps=50)
        _, log = train_flow(task, cfg)
        first = log.loss[:100].mean()
        last = log.loss[-100:].mean()
        assert last < first

    def test_independent_target_collapses_conditionals(self):
        # two labels, identical target: guided and unconditional fields agree
        task = AnalyticGaussianTask(means=np.array([[0.0], [0.0]]), sigma2=1.0)
        cfg = TrainConfig(iterations=1500, batch_size=128, hidden=(48, 48), seed=1,
                          warmup_steps=100)
        model, _ = train_flow(task, cfg)
        xs = np.linspace(-2, 2, 9)[:, None]
        diffs = []
        for t in (0.1, 0.3, 0.5, 0.7, 0.9):
            for y in (0, 1):
                d = model.guided_velocity(xs, y, t) - model.unconditional_velocity(xs, t)
                diffs.append(d**2)
        assert float(np.mean(diffs)) < 0.05

    def test_point_mass_target_concentrates(self):
        c = 0.7
        cfg = TrainConfig(iterations=2000, batch_size=128, hidden=(48, 48), seed=2,
                          warmup_steps=100)
        model, _ = train_flow(_PointMassTask(c), cfg)
        rng = np.random.default_rng(0)
        out = euler_sample_batch(model, 0, 500, 100, w=1.0, rng=rng)
        assert abs(out.mean() - c) < 0.1

    def test_loss_beats_unconditional_variance_baseline(self, rho09_model):
        model, log, view, task = rho09_model
        rng = np.random.default_rng(123)
        x1, _ = view.sample_joint(rng, 4000)
        x0 = rng.standard_normal(x1.shape)
        baseline = np.mean(np.sum((x1 - x0) ** 2, axis=1))
        assert log.loss[-200:].mean() < baseline

    def test_divergence_aborts_with_recent_losses(self):
        class HugeTask:
            data_dim = 1
            condition_values = (0,)

            def sample_joint(self, rng, n):
                return np.full((n, 1), 1e4), np.zeros(n, dtype=int)

        with pytest.raises(NumericalError, match="diverged"):
            train_flow(HugeTask(), TrainConfig(iterations=10, batch_size=8, seed=0))

    def test_validates_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(iterations=0)
        with pytest.raises(ConfigError):
            TrainConfig(iterations=10, p_uncond=1.0)

    def test_same_seed_is_bit_identical(self):
        task = AnalyticGaussianTask(means=np.array([[-1.0], [1.0]]), sigma2=1.0)
        cfg = TrainConfig(iterations=120, batch_size=64, hidden=(16,), seed=5)
        m1, _ = train_flow(task, cfg)
        m2, _ = train_flow(task, cfg)
        assert np.array_equal(m1.params, m2.params)


class TestModelSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        model = _random_model(seed=11)
        path = tmp_path / "model.json"
        save_model(model, path, rng_seed=11)
        again = load_model(path)
        assert np.array_equal(model.params, again.params)
        assert again.codec.values == model.codec.values
        assert again.p_uncond == model.p_uncond

    def test_continuous_codec_round_trip(self):
        rng = np.random.default_rng(12)
        codec = ContinuousCodec(
            weight=rng.standard_normal((3, 2)),
            bias=rng.standard_normal(3),
            null=rng.standard_normal(3),
        )
        net = nn.init_dense_net(
            (2 + 3 + N_TIME_FEATURES, 8, 2), ("tanh", "identity"), rng
        )
        model = FlowModel(net=net, codec=codec, data_dim=2, p_uncond=0.2)
        again = model_from_dict(model_to_dict(model))
        assert np.array_equal(model.params, again.params)

    def test_version_mismatch_is_explicit(self):
        doc = model_to_dict(_random_model(seed=13))
        doc["format_version"] = 99
        with pytest.raises(ConfigError, match="format_version"):
            model_from_dict(doc)
