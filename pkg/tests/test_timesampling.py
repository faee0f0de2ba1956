"""Tests for the truncated time density, its inverse CDF, and Lambert W."""

import numpy as np
import pytest
import scipy.special
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.integrate import quad
from scipy.stats import kstest

from flowmi.errors import ConfigError
from flowmi.timesampling import (
    TimeSampler,
    cdf,
    inverse_cdf,
    lambert_w0,
    sample_time,
    truncated_density,
)


class TestLambertW:
    def test_known_values(self):
        assert lambert_w0(0.0) == 0.0
        assert_allclose(lambert_w0(np.e), 1.0, atol=1e-14)
        assert lambert_w0(-np.exp(-1.0)) == -1.0

    def test_domain_error_below_branch_point(self):
        with pytest.raises(ConfigError, match="-1/e"):
            lambert_w0(-0.5)

    def test_residual_bound_on_grid(self):
        z = np.linspace(-np.exp(-1.0), 10.0, 10_000)
        w = lambert_w0(z)
        resid = np.abs(w * np.exp(w) - z)
        assert np.all(resid <= 1e-12 * np.maximum(1.0, np.abs(z)))

    def test_agrees_with_scipy(self):
        z = np.concatenate([
            np.linspace(-np.exp(-1) + 1e-12, 1.0, 500),
            np.linspace(1.0, 500.0, 500),
        ])
        ours = lambert_w0(z)
        ref = np.real(scipy.special.lambertw(z))
        assert_allclose(ours, ref, atol=1e-10, rtol=1e-10)

    @given(st.floats(min_value=-0.36787944117144233, max_value=1e6,
                     allow_nan=False, allow_infinity=False))
    @settings(deadline=None, max_examples=200)
    def test_residual_property(self, z):
        w = lambert_w0(z)
        assert w >= -1.0
        assert abs(w * np.exp(w) - z) <= 1e-12 * max(1.0, abs(z))


class TestTruncatedDensity:
    def test_zero_at_origin(self):
        assert truncated_density(0.0, TimeSampler(0.99)) == 0.0

    def test_knee_continuity_and_flat_tail(self):
        s = TimeSampler(0.99)
        at_knee = truncated_density(s.t_eps, s)
        at_one = truncated_density(1.0, s)
        expected = (s.t_eps / (1 - s.t_eps)) / s.normalizer
        assert_allclose([at_knee, at_one], expected, rtol=1e-15)
        # just below the knee the t/(1-t) branch approaches the same value
        assert truncated_density(s.t_eps - 1e-9, s) == pytest.approx(expected, rel=1e-6)

    @pytest.mark.parametrize("t_eps", [0.9, 0.99, 1 - np.exp(-2)])
    def test_integrates_to_one(self, t_eps):
        s = TimeSampler(t_eps)
        total, err = quad(lambda t: truncated_density(t, s), 0.0, 1.0, limit=200)
        assert abs(total - 1.0) <= 1e-8

    def test_domain_check(self):
        with pytest.raises(ConfigError):
            truncated_density(1.5, TimeSampler(0.99))

    def test_weight_identity_below_knee(self):
        # the un-normalized density equals t/(1-t) bit-exactly below the knee;
        # normalizing and multiplying Z back costs at most one rounding each way
        from flowmi.timesampling import frozen_ratio

        s = TimeSampler(0.99)
        t = np.linspace(0.0, s.t_eps - 1e-12, 1000)
        assert np.array_equal(frozen_ratio(t, s), t / (1 - t))
        assert_allclose(truncated_density(t, s) * s.normalizer, t / (1 - t), rtol=1e-15)


class TestInverseCdf:
    def test_endpoints(self):
        s = TimeSampler(0.99)
        assert inverse_cdf(0.0, s) == 0.0
        assert inverse_cdf(1.0, s) == 1.0

    @pytest.mark.parametrize("t_eps", [0.9, 0.99, 1 - np.exp(-2)])
    def test_branch_continuity_at_split(self, t_eps):
        s = TimeSampler(t_eps)
        u_star = s.branch_u
        z = s.normalizer
        lower = 1.0 + lambert_w0(-np.exp(-z * u_star - 1.0))
        upper = 1.0 + (1 - t_eps) / t_eps * (np.log1p(-t_eps) + z * u_star)
        assert abs(lower - t_eps) <= 1e-12
        assert abs(upper - t_eps) <= 1e-12

    def test_derived_branch_point_value(self):
        # t_eps = 1 - e^-2 gives Z = 2 and u* = 0.567668...; both formulas
        # meet at t_eps = 0.864664...
        s = TimeSampler(1 - np.exp(-2.0))
        assert_allclose(s.normalizer, 2.0, atol=1e-15)
        assert_allclose(s.branch_u, (2.0 - (1 - np.exp(-2.0))) / 2.0, atol=1e-15)
        assert_allclose(s.branch_u, 0.5676676416183064, atol=1e-12)
        assert_allclose(inverse_cdf(s.branch_u, s), 0.8646647167633873, atol=1e-12)

    def test_round_trip_through_numerical_cdf(self):
        s = TimeSampler(0.99)
        for u in np.linspace(0.01, 0.999, 25):
            t = inverse_cdf(float(u), s)
            f, _ = quad(lambda x: truncated_density(x, s), 0.0, t,
                        limit=400, epsabs=1e-13, epsrel=1e-13)
            assert abs(f - u) <= 1e-9

    def test_domain_check(self):
        with pytest.raises(ConfigError):
            inverse_cdf(-0.1, TimeSampler(0.99))
        with pytest.raises(ConfigError):
            inverse_cdf(1.1, TimeSampler(0.99))

    @given(st.floats(min_value=0.0, max_value=1.0), st.floats(min_value=0.0, max_value=1.0))
    @settings(deadline=None, max_examples=200)
    def test_monotone_in_u(self, u1, u2):
        s = TimeSampler(0.99)
        lo, hi = sorted((u1, u2))
        assert inverse_cdf(lo, s) <= inverse_cdf(hi, s) + 1e-15

    def test_closed_form_cdf_inverts(self):
        s = TimeSampler(0.9)
        u = np.linspace(0.0, 1.0, 101)
        assert_allclose(cdf(inverse_cdf(u, s), s), u, atol=1e-12)


class TestSampleTime:
    def test_draws_lie_in_unit_interval(self):
        s = TimeSampler(0.99)
        t = sample_time(np.random.default_rng(0), s, 10_000)
        assert np.all((t >= 0.0) & (t <= 1.0))

    def test_kolmogorov_smirnov_against_analytic_cdf(self):
        s = TimeSampler(0.99)
        t = sample_time(np.random.default_rng(42), s, 100_000)
        stat = kstest(t, lambda x: cdf(x, s)).statistic
        assert stat < 0.01

    def test_tail_mass_fraction(self):
        s = TimeSampler(1 - np.exp(-2.0))
        t = sample_time(np.random.default_rng(7), s, 100_000)
        frac = float((t >= s.t_eps).mean())
        expected = 1.0 - s.branch_u  # = 0.432332...
        assert_allclose(expected, 0.4323323583816936, atol=1e-12)
        assert abs(frac - expected) <= 0.01


def test_sampler_validates_t_eps():
    with pytest.raises(ConfigError):
        TimeSampler(0.0)
    with pytest.raises(ConfigError):
        TimeSampler(1.0)
