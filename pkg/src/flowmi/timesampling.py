"""Non-uniform sampling of ODE time for the MI integral.

The time integrand carries a factor t/(1-t) whose second moment blows up
near t = 1. Variance is tamed by sampling t from the density proportional
to

    f(t) = t/(1-t)            for t in [0, t_eps)
         = t_eps/(1-t_eps)    for t in [t_eps, 1]

normalized by Z = -ln(1-t_eps). The inverse CDF is exact: below the knee it
is 1 + W0(-exp(-Z u - 1)) with W0 the principal Lambert W branch, above it
is affine in u. W0 is computed here by Halley iteration from a piecewise
initial guess; non-convergence is a hard error rather than a silent
fallback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError

_HALLEY_TOL = 1e-14
_HALLEY_MAX_ITER = 50


def _w0_initial_guess(z: np.ndarray) -> np.ndarray:
    """Piecewise starting point for the principal branch on z >= -1/e."""
    w = np.empty_like(z)
    near_branch = z < -0.25
    # series around the branch point z = -1/e in p = sqrt(2(e z + 1))
    p = np.sqrt(np.maximum(2.0 * (np.e * z[near_branch] + 1.0), 0.0))
    w[near_branch] = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p**3
    mid = (~near_branch) & (z < np.e)
    w[mid] = z[mid] / (1.0 + z[mid])
    large = z >= np.e
    lz = np.log(z[large])
    llz = np.log(lz)
    w[large] = lz - llz + llz / lz
    return w


def lambert_w0(z):
    """Principal branch of the Lambert W function for real z >= -1/e.

    Returns w >= -1 with w * exp(w) = z, residual below 1e-12 * max(1, |z|).
    Accepts scalars or arrays.
    """
    z_arr = np.asarray(z, dtype=np.float64)
    scalar = z_arr.ndim == 0
    z_flat = np.atleast_1d(z_arr).copy()
    branch_point = -np.exp(-1.0)
    if np.any(z_flat < branch_point):
        bad = float(z_flat[z_flat < branch_point][0])
        raise ConfigError(f"lambert_w0 domain is z >= -1/e; got z = {bad}")

    w = _w0_initial_guess(z_flat)
    # exact values at the boundary avoid a singular Halley denominator
    at_branch = z_flat == branch_point
    w[at_branch] = -1.0
    at_zero = z_flat == 0.0
    w[at_zero] = 0.0

    active = ~(at_branch | at_zero)
    tol = _HALLEY_TOL * np.maximum(1.0, np.abs(z_flat))
    for _ in range(_HALLEY_MAX_ITER):
        if not active.any():
            break
        wa = w[active]
        ew = np.exp(wa)
        f = wa * ew - z_flat[active]
        done = np.abs(f) <= tol[active]
        # Halley update: cubic convergence near the root
        denom = ew * (wa + 1.0) - (wa + 2.0) * f / (2.0 * wa + 2.0)
        step = f / denom
        w_next = wa - np.where(done, 0.0, step)
        w_next = np.maximum(w_next, -1.0)  # stay on the principal branch
        w[active] = w_next
        still = np.flatnonzero(active)[~done]
        active = np.zeros_like(active)
        active[still] = True
    residual = np.abs(w * np.exp(w) - z_flat)
    if np.any(residual > np.maximum(1.0, np.abs(z_flat)) * 1e-12):
        worst = float(z_flat[np.argmax(residual)])
        raise NumericalError(
            f"lambert_w0 Halley iteration did not converge at z = {worst} "
            f"(residual {float(residual.max()):.3e})"
        )
    return float(w[0]) if scalar else w.reshape(z_arr.shape)


@dataclass(frozen=True)
class TimeSampler:
    """Truncated t/(1-t) importance density with knee at t_eps."""

    t_eps: float = 0.99

    def __post_init__(self):
        if not (0.0 < self.t_eps < 1.0):
            raise ConfigError(f"t_eps must lie in (0, 1), got {self.t_eps}")

    @property
    def normalizer(self) -> float:
        """Z = -ln(1 - t_eps); the integral of the un-normalized density."""
        return -np.log1p(-self.t_eps)

    @property
    def cap(self) -> float:
        """Frozen ratio t_eps/(1 - t_eps) used beyond the knee."""
        return self.t_eps / (1.0 - self.t_eps)

    @property
    def branch_u(self) -> float:
        """CDF value at the knee; splits the two inverse-CDF formulas."""
        return (self.normalizer - self.t_eps) / self.normalizer


def frozen_ratio(t, sampler: TimeSampler):
    """t/(1-t) capped at the knee value; defined on all of [0, 1]."""
    t = np.asarray(t, dtype=np.float64)
    below = t < sampler.t_eps
    safe = np.where(below, t, 0.0)
    return np.where(below, safe / (1.0 - safe), sampler.cap)


def truncated_density(t, sampler: TimeSampler):
    """Normalized density f(t)/Z on [0, 1]."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0.0) | (t_arr > 1.0)):
        raise ConfigError("truncated_density is defined on t in [0, 1]")
    out = frozen_ratio(t_arr, sampler) / sampler.normalizer
    return float(out) if np.ndim(t) == 0 else out


def cdf(t, sampler: TimeSampler):
    """Closed-form CDF of the truncated density."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0.0) | (t_arr > 1.0)):
        raise ConfigError("cdf is defined on t in [0, 1]")
    z = sampler.normalizer
    below = t_arr < sampler.t_eps
    t_safe = np.where(below, t_arr, 0.0)
    lower = (-np.log1p(-t_safe) - t_safe) / z
    upper = ((z - sampler.t_eps) + sampler.cap * (t_arr - sampler.t_eps)) / z
    out = np.where(below, lower, upper)
    return float(out) if np.ndim(t) == 0 else out


def inverse_cdf(u, sampler: TimeSampler):
    """Exact inverse CDF; maps [0, 1] onto [0, 1].

    Below the branch value u* the solution of -ln(1-t) - t = Z u is
    t = 1 + W0(-exp(-Z u - 1)); at and above u* the CDF is affine, so
    t = 1 + (1-t_eps)/t_eps * (ln(1-t_eps) + Z u).
    """
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any((u_arr < 0.0) | (u_arr > 1.0)):
        raise ConfigError("inverse_cdf is defined on u in [0, 1]")
    z = sampler.normalizer
    u_flat = np.atleast_1d(u_arr)
    t = np.empty_like(u_flat)
    low = u_flat < sampler.branch_u
    if low.any():
        t[low] = 1.0 + lambert_w0(-np.exp(-z * u_flat[low] - 1.0))
    hi = ~low
    if hi.any():
        t[hi] = 1.0 + (1.0 - sampler.t_eps) / sampler.t_eps * (
            np.log1p(-sampler.t_eps) + z * u_flat[hi]
        )
    t = np.clip(t, 0.0, 1.0)
    return float(t[0]) if np.ndim(u) == 0 else t.reshape(u_arr.shape)


def sample_time(rng: np.random.Generator, sampler: TimeSampler, size=None):
    """Inverse-transform draw(s) from the truncated density."""
    return inverse_cdf(rng.uniform(size=size), sampler)
