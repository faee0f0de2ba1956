"""Mutual information from velocity fields.

For the straight conditional path with Gaussian source, the MI between data
X and condition Y equals a time integral of

    E_{X_t | Y} [ t/(1-t) * u(X_t|Y) . (u(X_t|Y) - u(X_t)) ]

where u(.|y) is the guided and u(.) the unconditional marginal velocity.
This module provides:

  * score_from_velocity: the pathwise score (t*u - x)/(1-t),
  * AnalyticGaussianTask: a finite Gaussian mixture whose guided and
    marginal velocities are available in closed form, so the estimator can
    be validated with no trained network in the loop,
  * pointwise_mi: the fused generate-and-score Euler loop for one condition,
  * mi_estimate: the aggregate Monte Carlo estimator with importance-sampled
    or uniform time draws.

Near t = 1 the raw t/(1-t) factor is frozen at its knee value
t_eps/(1-t_eps), matching the truncated importance density. The frozen
integrand keeps the variance of model-based estimates bounded; the exact
(unfrozen) tail reweighting is available via ``tail="exact"``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import dblquad, quad

from .errors import ConfigError, NumericalError
from .flow import combined_velocity
from .seeding import substream
from .timesampling import TimeSampler, frozen_ratio, sample_time

ESTIMATE_FORMAT_VERSION = 1

_CHUNK_ROWS = 131072


def score_from_velocity(u, x, t):
    """Score of the marginal path from its velocity: (t*u - x)/(1-t).

    Valid for t in [0, 1); at and beyond t = 1 the expression is singular
    and estimation relies on the frozen-ratio truncation policy instead.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr >= 1.0):
        raise NumericalError(
            "score_from_velocity is singular at t >= 1; the estimator handles "
            "the endpoint by freezing t/(1-t) at the t_eps knee (see TimeSampler)"
        )
    u = np.asarray(u, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    tt = t_arr[..., None] if t_arr.ndim == u.ndim - 1 else t_arr
    return (tt * u - x) / (1.0 - tt)


# ---------------------------------------------------------------------------
# Analytic oracle task
# ---------------------------------------------------------------------------


def _log_normal_pdf(sq_dist: np.ndarray, var, d: int) -> np.ndarray:
    return -0.5 * (sq_dist / var + d * np.log(2.0 * np.pi * var))


@dataclass(frozen=True)
class AnalyticGaussianTask:
    """Finite mixture q(x|y) = N(mu_y, sigma2 I) with prior pi over labels.

    The marginal path at time t is the mixture of N(t*mu_y, s_t^2 I) with
    s_t^2 = (1-t)^2 + t^2 sigma2, so guided and unconditional velocities,
    scores and posteriors are all closed-form. Labels are 0..K-1.
    """

    means: np.ndarray  # (K, d)
    sigma2: float = 1.0
    prior: np.ndarray | None = None

    is_exact_velocity = True

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "means", means)
        k = means.shape[0]
        prior = self.prior
        if prior is None:
            prior = np.full(k, 1.0 / k)
        prior = np.asarray(prior, dtype=np.float64)
        object.__setattr__(self, "prior", prior)
        if self.sigma2 <= 0:
            raise ConfigError(f"sigma2 must be positive, got {self.sigma2}")
        if prior.shape != (k,) or abs(prior.sum() - 1.0) > 1e-12 or np.any(prior < 0):
            raise ConfigError("prior must be a probability vector over the mixture labels")

    @property
    def n_conditions(self) -> int:
        return self.means.shape[0]

    @property
    def data_dim(self) -> int:
        return self.means.shape[1]

    @property
    def condition_values(self) -> tuple:
        return tuple(range(self.n_conditions))

    def path_var(self, t):
        t = np.asarray(t, dtype=np.float64)
        return (1.0 - t) ** 2 + t * t * self.sigma2

    # -- velocity interface (batched; y is a label scalar or (B,) array) --

    def _check_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t >= 1.0):
            raise NumericalError("analytic velocities are defined for t < 1")
        return t

    def guided_velocity(self, x, y, t):
        t = self._check_t(t)
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        rows = x[None, :] if single else x
        y_idx = np.atleast_1d(np.asarray(y, dtype=int))
        if y_idx.shape == (1,) and rows.shape[0] > 1:
            y_idx = np.full(rows.shape[0], y_idx[0])
        mu = self.means[y_idx]
        tt = t[:, None] if t.ndim == 1 else t
        s2 = self.path_var(t)
        s2 = s2[:, None] if np.ndim(s2) == 1 else s2
        u = mu + ((tt * self.sigma2 - (1.0 - tt)) / s2) * (rows - tt * mu)
        return u[0] if single else u

    def posterior(self, x, t):
        """P(y | X_t = x) along the path; shape (B, K)."""
        t = np.asarray(t, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        rows = x[None, :] if single else x
        tt = t[:, None, None] if t.ndim == 1 else t
        s2 = self.path_var(t)
        s2 = s2[:, None] if np.ndim(s2) == 1 else s2
        diff = rows[:, None, :] - tt * self.means[None, :, :]
        sq = np.sum(diff * diff, axis=2)
        logw = np.log(self.prior)[None, :] + _log_normal_pdf(sq, s2, self.data_dim)
        logw = logw - logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        return w[0] if single else w

    def unconditional_velocity(self, x, t):
        t = self._check_t(t)
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        rows = x[None, :] if single else x
        post = self.posterior(rows, t)
        tt = t[:, None, None] if t.ndim == 1 else t
        s2 = self.path_var(t)
        s2_col = s2[:, None, None] if np.ndim(s2) == 1 else s2
        mu = self.means[None, :, :]
        u_all = mu + ((tt * self.sigma2 - (1.0 - tt)) / s2_col) * (rows[:, None, :] - tt * mu)
        u = np.sum(post[:, :, None] * u_all, axis=1)
        return u[0] if single else u

    def cfg_velocity(self, x, y, t, w: float):
        return combined_velocity(self, x, y, t, w)

    # -- closed-form scores (test oracles) --

    def score_guided(self, x, y, t):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        rows = x[None, :] if single else x
        y_idx = np.atleast_1d(np.asarray(y, dtype=int))
        if y_idx.shape == (1,) and rows.shape[0] > 1:
            y_idx = np.full(rows.shape[0], y_idx[0])
        t = np.asarray(t, dtype=np.float64)
        tt = t[:, None] if t.ndim == 1 else t
        s2 = self.path_var(t)
        s2 = s2[:, None] if np.ndim(s2) == 1 else s2
        s = -(rows - tt * self.means[y_idx]) / s2
        return s[0] if single else s

    def score_marginal(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        rows = x[None, :] if single else x
        post = self.posterior(rows, t)
        t = np.asarray(t, dtype=np.float64)
        tt = t[:, None, None] if t.ndim == 1 else t
        s2 = self.path_var(t)
        s2_col = s2[:, None, None] if np.ndim(s2) == 1 else s2
        comp = -(rows[:, None, :] - tt * self.means[None, :, :]) / s2_col
        s = np.sum(post[:, :, None] * comp, axis=1)
        return s[0] if single else s

    def marginal_logpdf(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        rows = x[None, :] if single else x
        t = np.asarray(t, dtype=np.float64)
        tt = t[:, None, None] if t.ndim == 1 else t
        s2 = self.path_var(t)
        s2_col = s2[:, None] if np.ndim(s2) == 1 else s2
        diff = rows[:, None, :] - tt * self.means[None, :, :]
        sq = np.sum(diff * diff, axis=2)
        logc = np.log(self.prior)[None, :] + _log_normal_pdf(sq, s2_col, self.data_dim)
        m = logc.max(axis=1)
        out = m + np.log(np.sum(np.exp(logc - m[:, None]), axis=1))
        return out[0] if single else out

    # -- sampling --

    def sample_y(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.choice(self.n_conditions, size=n, p=self.prior)

    def sample_conditional(self, rng: np.random.Generator, y, n: int) -> np.ndarray:
        y_idx = np.atleast_1d(np.asarray(y, dtype=int))
        if y_idx.shape == (1,):
            mu = np.tile(self.means[y_idx[0]], (n, 1))
        else:
            mu = self.means[y_idx]
        return mu + np.sqrt(self.sigma2) * rng.standard_normal((n, self.data_dim))

    def sample_joint(self, rng: np.random.Generator, n: int):
        y = self.sample_y(rng, n)
        return self.sample_conditional(rng, y, n), y

    def posterior_data(self, x) -> np.ndarray:
        """Posterior over labels given a clean data sample (the t=1 endpoint)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        rows = x[None, :] if single else x
        diff = rows[:, None, :] - self.means[None, :, :]
        sq = np.sum(diff * diff, axis=2)
        logw = np.log(self.prior)[None, :] + _log_normal_pdf(sq, self.sigma2, self.data_dim)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        return w[0] if single else w

    def quadrature_mi(self, tol: float = 1e-8) -> float:
        """Ground-truth MI by adaptive quadrature of the mixture KL (d <= 2)."""
        if self.data_dim == 1:
            return _mixture_mi_quad_1d(self, tol)
        if self.data_dim == 2:
            return _mixture_mi_quad_2d(self, tol)
        raise ConfigError("quadrature ground truth implemented for 1-D and 2-D only")


def _mixture_mi_quad_1d(task: AnalyticGaussianTask, tol: float) -> float:
    mu = task.means[:, 0]
    sig = np.sqrt(task.sigma2)
    lo = float(mu.min() - 12.0 * sig - 1.0)
    hi = float(mu.max() + 12.0 * sig + 1.0)

    def kl_integrand(x, k):
        sq = (x - mu) ** 2
        logp = np.log(task.prior) - 0.5 * (sq / task.sigma2 + np.log(2 * np.pi * task.sigma2))
        m = logp.max()
        log_mix = m + np.log(np.exp(logp - m).sum())
        log_cond = -0.5 * (sq[k] / task.sigma2 + np.log(2 * np.pi * task.sigma2))
        return np.exp(log_cond) * (log_cond - log_mix)

    total, err_total = 0.0, 0.0
    for k in range(task.n_conditions):
        val, err = quad(kl_integrand, lo, hi, args=(k,), limit=400, epsabs=tol / 10)
        total += task.prior[k] * val
        err_total += task.prior[k] * err
    if err_total > max(tol, abs(total) * tol):
        raise NumericalError(f"mixture MI quadrature did not converge (residual {err_total:.3e})")
    return float(total)


def _mixture_mi_quad_2d(task: AnalyticGaussianTask, tol: float) -> float:
    mu = task.means
    sig = np.sqrt(task.sigma2)
    lo0, hi0 = mu[:, 0].min() - 10 * sig, mu[:, 0].max() + 10 * sig
    lo1, hi1 = mu[:, 1].min() - 10 * sig, mu[:, 1].max() + 10 * sig

    def kl_integrand(x1, x0, k):
        x = np.array([x0, x1])
        sq = np.sum((x[None, :] - mu) ** 2, axis=1)
        logp = np.log(task.prior) + _log_normal_pdf(sq, task.sigma2, 2)
        m = logp.max()
        log_mix = m + np.log(np.exp(logp - m).sum())
        log_cond = _log_normal_pdf(sq[k], task.sigma2, 2)
        return np.exp(log_cond) * (log_cond - log_mix)

    total, err_total = 0.0, 0.0
    for k in range(task.n_conditions):
        val, err = dblquad(kl_integrand, lo0, hi0, lo1, hi1, args=(k,), epsabs=tol)
        total += task.prior[k] * val
        err_total += task.prior[k] * err
    if err_total > max(tol * 10, abs(total) * tol * 10):
        raise NumericalError(f"mixture MI quadrature did not converge (residual {err_total:.3e})")
    return float(total)


# ---------------------------------------------------------------------------
# Point-wise MI (fused generation + scoring)
# ---------------------------------------------------------------------------


def pointwise_mi_batch(
    source,
    y,
    n: int,
    *,
    steps: int = 100,
    w: float = 4.5,
    w_step: float | None = None,
    t_eps: float = 0.99,
    rng: np.random.Generator | None = None,
    x0=None,
):
    """n fused Euler runs for one condition; returns (endpoints, MI values).

    At each grid time the accumulator adds dt * min(t/(1-t), knee) times the
    dot product of the (CFG-calibrated) guided velocity with the difference
    between guided and unconditional velocity. The state advances with the
    w_step-calibrated velocity (defaults to the scoring w).
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    sampler = TimeSampler(t_eps)
    w_step = w if w_step is None else w_step
    d = getattr(source, "data_dim")
    if x0 is None:
        x = rng.standard_normal((n, d))
    else:
        x = np.array(x0, dtype=np.float64, copy=True)
    acc = np.zeros(n)
    dt = 1.0 / steps
    for k in range(steps):
        t = k * dt
        u_y = combined_velocity(source, x, y, t, w)
        u_null = source.unconditional_velocity(x, t)
        ratio = float(frozen_ratio(t, sampler))
        acc += dt * ratio * np.sum(u_y * (u_y - u_null), axis=1)
        if not np.all(np.isfinite(acc)):
            raise NumericalError(f"non-finite point-wise MI accumulator at step {k}")
        u_adv = u_y if w_step == w else combined_velocity(source, x, y, t, w_step)
        x = x + u_adv * dt
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite ODE state at step {k}")
    return x, acc


def pointwise_mi(source, y, *, steps: int = 100, w: float = 4.5, w_step=None,
                 t_eps: float = 0.99, rng=None, x0=None):
    """Single fused run; returns (endpoint, point-wise MI)."""
    x0_row = None if x0 is None else np.asarray(x0, dtype=np.float64)[None, :]
    xs, mis = pointwise_mi_batch(
        source, y, 1, steps=steps, w=w, w_step=w_step, t_eps=t_eps, rng=rng, x0=x0_row
    )
    return xs[0], float(mis[0])


# ---------------------------------------------------------------------------
# Aggregate estimator
# ---------------------------------------------------------------------------

MODES = ("data-coupled", "trajectory")
TIME_SAMPLING = ("importance", "uniform")
TAILS = ("frozen", "exact")


@dataclass(frozen=True)
class MIEstimate:
    value: float
    stderr: float
    n_y: int
    n_t: int
    n_x: int
    seed: int
    wall_time_s: float
    estimator_tag: str
    mode: str = "data-coupled"
    t_eps: float = 0.99
    w: float = 1.0
    time_sampling: str = "importance"

    def __post_init__(self):
        if self.stderr < 0 or min(self.n_y, self.n_t, self.n_x) <= 0:
            raise ConfigError("MIEstimate requires stderr >= 0 and positive counts")

    def to_dict(self) -> dict:
        return {
            "format_version": ESTIMATE_FORMAT_VERSION,
            "value": self.value,
            "stderr": self.stderr,
            "n_y": self.n_y,
            "n_t": self.n_t,
            "n_x": self.n_x,
            "seed": self.seed,
            "wall_time_s": self.wall_time_s,
            "estimator_tag": self.estimator_tag,
            "mode": self.mode,
            "t_eps": self.t_eps,
            "w": self.w,
            "time_sampling": self.time_sampling,
        }

    CSV_COLUMNS = (
        "estimator_tag", "value", "stderr", "n_y", "n_t", "n_x",
        "seed", "wall_time_s", "mode", "t_eps", "w", "time_sampling",
    )

    def csv_row(self) -> str:
        d = self.to_dict()
        return ",".join(repr(d[c]) if isinstance(d[c], float) else str(d[c])
                        for c in self.CSV_COLUMNS)


def _draw_times(rng, sampler: TimeSampler, time_sampling: str, size):
    if time_sampling == "importance":
        return sample_time(rng, sampler, size=size)
    return rng.uniform(0.0, 1.0, size=size)


def _weights(t: np.ndarray, sampler: TimeSampler, time_sampling: str, tail: str) -> np.ndarray:
    """Multiplier applied to the raw dot product u_y . (u_y - u_null).

    Importance draws cancel the ratio: the frozen integrand over the
    truncated density leaves the constant Z. The exact tail restores the
    untruncated ratio beyond the knee.
    """
    z = sampler.normalizer
    if time_sampling == "importance":
        if tail == "frozen":
            return np.full_like(t, z)
        above = t >= sampler.t_eps
        out = np.full_like(t, z)
        safe = np.where(above, t, 0.0)
        out[above] = z * (safe[above] / (1.0 - safe[above])) / sampler.cap
        return out
    if tail == "frozen":
        return frozen_ratio(t, sampler)
    return t / (1.0 - t)


def _velocity_dot(source, x, y_rows, t, w):
    u_y = combined_velocity(source, x, y_rows, t, w)
    u_null = source.unconditional_velocity(x, t)
    return np.sum(u_y * (u_y - u_null), axis=1)


def _repeat_conditions(y, times: int):
    y = np.asarray(y)
    return np.repeat(y, times, axis=0)


def _per_y_data_coupled(source, task, rng, cfg) -> np.ndarray:
    n_y, n_t, n_x = cfg["n_y"], cfg["n_t"], cfg["n_x"]
    sampler = cfg["sampler"]
    x1, y = task.sample_joint(rng, n_y)
    x1 = np.asarray(x1, dtype=np.float64)
    d = x1.shape[1]
    t = _draw_times(rng, sampler, cfg["time_sampling"], (n_y, n_t))
    weights = _weights(t.ravel(), sampler, cfg["time_sampling"], cfg["tail"]).reshape(n_y, n_t)

    per_y = np.zeros(n_y)
    inner = n_t * n_x
    # chunk over y to bound the (rows, d) working set
    y_per_chunk = max(1, _CHUNK_ROWS // inner)
    for lo in range(0, n_y, y_per_chunk):
        hi = min(lo + y_per_chunk, n_y)
        m = hi - lo
        x0 = rng.standard_normal((m, n_t, n_x, d))
        t_blk = t[lo:hi]
        xt = t_blk[:, :, None, None] * x1[lo:hi, None, None, :] + (
            1.0 - t_blk[:, :, None, None]
        ) * x0
        rows = xt.reshape(m * inner, d)
        t_rows = np.repeat(t_blk.reshape(m * n_t), n_x)
        y_rows = _repeat_conditions(y[lo:hi], inner)
        dots = _velocity_dot(source, rows, y_rows, t_rows, cfg["w"]).reshape(m, n_t, n_x)
        contrib = weights[lo:hi][:, :, None] * dots
        per_y[lo:hi] = contrib.reshape(m, inner).mean(axis=1)
    if not np.all(np.isfinite(per_y)):
        raise NumericalError("non-finite contribution in data-coupled estimate")
    return per_y


def _per_y_trajectory(source, task, rng, cfg) -> np.ndarray:
    n_y, n_t, n_x = cfg["n_y"], cfg["n_t"], cfg["n_x"]
    steps = cfg["steps"]
    sampler = cfg["sampler"]
    y = task.sample_y(rng, n_y)
    d = getattr(source, "data_dim")
    t = _draw_times(rng, sampler, cfg["time_sampling"], (n_y, n_t))
    weights = _weights(t.ravel(), sampler, cfg["time_sampling"], cfg["tail"]).reshape(n_y, n_t)
    dt = 1.0 / steps
    bins = np.minimum((t * steps).astype(int), steps - 1)

    x = rng.standard_normal((n_y * n_x, d))
    y_rep = _repeat_conditions(y, n_x)
    contrib = np.zeros((n_y, n_t))
    for k in range(steps):
        tk = k * dt
        u_adv = combined_velocity(source, x, y_rep, tk, cfg["w_step"])
        sel = np.nonzero(bins == k)
        if sel[0].size:
            yi, ti = sel
            # ODE state advanced partially from the grid point to the drawn t
            states = x.reshape(n_y, n_x, d)[yi]
            u_here = u_adv.reshape(n_y, n_x, d)[yi]
            frac = (t[yi, ti] - tk)[:, None, None]
            xt = (states + u_here * frac).reshape(yi.size * n_x, d)
            t_rows = np.repeat(t[yi, ti], n_x)
            y_rows = _repeat_conditions(y[yi], n_x)
            dots = _velocity_dot(source, xt, y_rows, t_rows, cfg["w"]).reshape(yi.size, n_x)
            contrib[yi, ti] = weights[yi, ti] * dots.mean(axis=1)
        x = x + u_adv * dt
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite ODE state at step {k} in trajectory estimate")
    if not np.all(np.isfinite(contrib)):
        raise NumericalError("non-finite contribution in trajectory estimate")
    return contrib.mean(axis=1)


def mi_estimate(
    source,
    task,
    *,
    n_y: int,
    n_t: int,
    n_x: int,
    mode: str = "data-coupled",
    t_eps: float = 0.99,
    w: float = 1.0,
    w_step: float | None = None,
    time_sampling: str = "importance",
    tail: str = "frozen",
    steps: int = 100,
    seed: int = 0,
) -> MIEstimate:
    """Monte Carlo MI estimate from a velocity source.

    Outer loop over n_y condition draws; per condition the time integral is
    estimated from n_t time draws with n_x states each. In data-coupled mode
    X_t = t*x1 + (1-t)*x0 from joint samples; in trajectory mode X_t is the
    source's own ODE state at the drawn time. The standard error is the
    empirical deviation across the per-condition estimates, so negative
    values are legal outputs and nothing is clamped.
    """
    if min(n_y, n_t, n_x) <= 0:
        raise ConfigError("n_y, n_t and n_x must all be positive")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if time_sampling not in TIME_SAMPLING:
        raise ConfigError(f"time_sampling must be one of {TIME_SAMPLING}")
    if tail not in TAILS:
        raise ConfigError(f"tail must be one of {TAILS}")
    sampler = TimeSampler(t_eps)
    rng = substream(seed, "mi-estimate", mode, time_sampling)
    cfg = {
        "n_y": n_y,
        "n_t": n_t,
        "n_x": n_x,
        "sampler": sampler,
        "w": w,
        "w_step": w if w_step is None else w_step,
        "time_sampling": time_sampling,
        "tail": tail,
        "steps": steps,
    }
    start = time.perf_counter()
    if mode == "data-coupled":
        per_y = _per_y_data_coupled(source, task, rng, cfg)
    else:
        per_y = _per_y_trajectory(source, task, rng, cfg)
    wall = time.perf_counter() - start
    value = float(per_y.mean())
    stderr = float(per_y.std(ddof=1) / np.sqrt(n_y)) if n_y > 1 else 0.0
    tag = "rfmi-oracle" if getattr(source, "is_exact_velocity", False) else f"rfmi-{mode}"
    return MIEstimate(
        value=value,
        stderr=stderr,
        n_y=n_y,
        n_t=n_t,
        n_x=n_x,
        seed=seed,
        wall_time_s=wall,
        estimator_tag=tag,
        mode=mode,
        t_eps=t_eps,
        w=w,
        time_sampling=time_sampling,
    )
