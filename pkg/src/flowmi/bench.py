"""Known-MI synthetic task suite, InfoNCE baseline, and benchmark runner.

Task families:
  correlated-gaussian          d standard-normal pairs with per-pair
                               correlation; MI is -1/2 sum ln(1-rho_i^2)
  gaussian-mixture-label       discrete label, Gaussian conditional; MI from
                               adaptive quadrature of the mixture KL
  nonlinear-transformed-gaussian
                               correlated-gaussian with a fixed strictly
                               monotone elementwise map applied to X; MI is
                               unchanged under per-variable diffeomorphisms

The runner trains whatever each estimator needs per cell, derives every
cell's RNG from (master seed, task_id, estimator_tag), and emits a CSV
report plus a JSON mirror and a task-by-estimator bias heatmap CSV.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from . import nn
from .errors import ConfigError, FlowMIError, NumericalError
from .flow import TrainConfig, train_flow
from .mi import AnalyticGaussianTask, MIEstimate, mi_estimate
from .seeding import seed_sequence, substream

REPORT_FORMAT_VERSION = 1

FAMILIES = (
    "correlated-gaussian",
    "gaussian-mixture-label",
    "nonlinear-transformed-gaussian",
)

ESTIMATOR_TAGS = ("rfmi-data-coupled", "rfmi-trajectory", "rfmi-oracle", "infonce")


def _cube_root(x: np.ndarray) -> np.ndarray:
    return np.cbrt(x)


_TRANSFORMS = {"cube-root": _cube_root}


@dataclass(frozen=True)
class MITask:
    task_id: str
    family: str
    dim: int
    params: dict
    true_mi: float
    true_mi_provenance: str
    analytic: AnalyticGaussianTask | None = None

    def __post_init__(self):
        if self.true_mi < 0:
            raise ConfigError(f"true MI must be non-negative, got {self.true_mi}")

    @property
    def condition_is_label(self) -> bool:
        return self.family == "gaussian-mixture-label"

    def sample_joint(self, rng: np.random.Generator, n: int):
        """n i.i.d. draws from the joint; y is a label array or (n, d) matrix."""
        if n <= 0:
            raise ConfigError(f"sample count must be positive, got {n}")
        if self.family == "gaussian-mixture-label":
            return self.analytic.sample_joint(rng, n)
        rho = np.asarray(self.params["rho"], dtype=np.float64)
        a = rng.standard_normal((n, self.dim))
        b = rng.standard_normal((n, self.dim))
        x = a
        y = rho * a + np.sqrt(1.0 - rho * rho) * b
        if self.family == "nonlinear-transformed-gaussian":
            x = _TRANSFORMS[self.params["transform"]](x)
        return x, y


def sample_pair(task: MITask, rng: np.random.Generator, n: int):
    """Joint samples from a task (module-level alias for task.sample_joint)."""
    return task.sample_joint(rng, n)


def make_task(family: str, params: dict, task_id: str | None = None) -> MITask:
    """Build a task with its ground-truth MI attached."""
    if family in ("correlated-gaussian", "nonlinear-transformed-gaussian"):
        rho = np.atleast_1d(np.asarray(params["rho"], dtype=np.float64))
        if np.any(np.abs(rho) >= 1.0):
            raise ConfigError(f"correlations must satisfy |rho| < 1, got {rho}")
        true_mi = float(-0.5 * np.sum(np.log(1.0 - rho * rho)))
        p = {"rho": tuple(float(r) for r in rho)}
        if family == "nonlinear-transformed-gaussian":
            transform = params.get("transform", "cube-root")
            if transform not in _TRANSFORMS:
                raise ConfigError(
                    f"unknown transform {transform!r}; supported: {sorted(_TRANSFORMS)}"
                )
            p["transform"] = transform
        if task_id is None:
            prefix = "cbrt" if family == "nonlinear-transformed-gaussian" else "corr"
            task_id = f"{prefix}-{len(rho)}d-rho" + "-".join(f"{r:g}" for r in rho)
        return MITask(task_id, family, len(rho), p, true_mi, "closed-form")
    if family == "gaussian-mixture-label":
        analytic = AnalyticGaussianTask(
            means=np.asarray(params["means"], dtype=np.float64),
            sigma2=float(params.get("sigma2", 1.0)),
            prior=params.get("prior"),
        )
        true_mi = analytic.quadrature_mi()
        if task_id is None:
            task_id = f"mix-{analytic.data_dim}d-k{analytic.n_conditions}"
        p = {
            "means": [[float(v) for v in row] for row in analytic.means],
            "sigma2": float(analytic.sigma2),
            "prior": [float(v) for v in analytic.prior],
        }
        return MITask(task_id, family, analytic.data_dim, p, true_mi, "quadrature", analytic)
    raise ConfigError(f"unknown task family {family!r}; expected one of {FAMILIES}")


def default_suite() -> list:
    """The six-task desk-scale suite spanning MI level, dimension and shape."""
    return [
        make_task("correlated-gaussian", {"rho": [0.0]}, "corr-1d-rho0.0"),
        make_task("correlated-gaussian", {"rho": [0.5]}, "corr-1d-rho0.5"),
        make_task("correlated-gaussian", {"rho": [0.9]}, "corr-1d-rho0.9"),
        make_task("gaussian-mixture-label", {"means": [[-2.0], [2.0]]}, "mix-1d-pm2"),
        make_task("correlated-gaussian", {"rho": [0.7] * 5}, "corr-5d-rho0.7"),
        make_task(
            "nonlinear-transformed-gaussian",
            {"rho": [0.9], "transform": "cube-root"},
            "cbrt-1d-rho0.9",
        ),
    ]


# ---------------------------------------------------------------------------
# Flow-facing view of a task (condition encoding)
# ---------------------------------------------------------------------------


class FlowTaskView:
    """Adapts an MITask to the sampler protocol of train_flow / mi_estimate.

    Labels pass through as a discrete condition set. Scalar continuous
    conditions are discretized into equal-mass bins (edges from the exact
    standard-normal quantiles). Higher-dimensional conditions keep their raw
    values and use the continuous codec.
    """

    def __init__(self, task: MITask, n_bins: int = 32):
        self.task = task
        self.n_bins = n_bins
        self.data_dim = task.dim
        if task.condition_is_label:
            self.condition_values = task.analytic.condition_values
            if task.analytic.data_dim == 1:
                self.condition_locations = tuple(task.analytic.means[:, 0])
        elif task.dim == 1:
            if n_bins < 2:
                raise ConfigError(f"need at least 2 bins, got {n_bins}")
            self.condition_values = tuple(range(n_bins))
            self._edges = ndtri(np.arange(1, n_bins) / n_bins)
            # conditional means of the standard-normal marginal per bin
            pdf = np.exp(-0.5 * np.concatenate([[np.inf], self._edges**2, [np.inf]]))
            pdf = np.where(np.isfinite(pdf), pdf, 0.0) / np.sqrt(2 * np.pi)
            self.condition_locations = tuple(n_bins * (pdf[:-1] - pdf[1:]))
        else:
            self.condition_dim = task.dim

    def encode_condition(self, y):
        if self.task.condition_is_label:
            return y
        if self.data_dim == 1:
            return np.searchsorted(self._edges, np.asarray(y)[:, 0])
        return y

    def sample_joint(self, rng: np.random.Generator, n: int):
        x, y = self.task.sample_joint(rng, n)
        return x, self.encode_condition(y)

    def sample_y(self, rng: np.random.Generator, n: int):
        if self.task.condition_is_label:
            return self.task.analytic.sample_y(rng, n)
        if self.data_dim == 1:
            return rng.integers(0, self.n_bins, size=n)  # bins are equal-mass
        return rng.standard_normal((n, self.data_dim))


class PooledSampler:
    """Serves training batches from a fixed pool, enforcing the sample budget.

    The pool is drawn once from the wrapped view; batches resample indices
    with replacement, so training sees at most ``pool_size`` distinct joint
    samples no matter how many iterations run.
    """

    def __init__(self, view: FlowTaskView, pool_size: int, rng: np.random.Generator):
        if pool_size <= 0:
            raise ConfigError(f"pool_size must be positive, got {pool_size}")
        self.view = view
        self.data_dim = view.data_dim
        if hasattr(view, "condition_values"):
            self.condition_values = view.condition_values
            if hasattr(view, "condition_locations"):
                self.condition_locations = view.condition_locations
        else:
            self.condition_dim = view.condition_dim
        self._x, self._y = view.sample_joint(rng, pool_size)

    def sample_joint(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, self._x.shape[0], size=n)
        return self._x[idx], self._y[idx]

    def sample_y(self, rng: np.random.Generator, n: int):
        return self.view.sample_y(rng, n)


# ---------------------------------------------------------------------------
# InfoNCE baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InfoNCEConfig:
    batch_k: int = 256
    steps: int = 1500
    lr: float = 1e-3
    embed_dim: int = 64
    hidden: tuple = (128, 128)
    activation: str = "relu"
    train_samples: int = 50_000
    test_samples: int = 5_000
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    warmup_steps: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.batch_k < 2:
            raise ConfigError(f"InfoNCE needs batch_k >= 2, got {self.batch_k}")
        if self.steps <= 0:
            raise ConfigError("InfoNCE steps must be positive")


def _encode_infonce_y(task: MITask, y) -> np.ndarray:
    if task.condition_is_label:
        k = task.analytic.n_conditions
        out = np.zeros((len(y), k))
        out[np.arange(len(y)), np.asarray(y, dtype=int)] = 1.0
        return out
    return np.asarray(y, dtype=np.float64)


def _nce_bound_terms(gx: np.ndarray, hy: np.ndarray):
    scores = gx @ hy.T
    diag = np.diag(scores)
    m = scores.max(axis=1, keepdims=True)
    lse = (m[:, 0] + np.log(np.exp(scores - m).sum(axis=1)))
    return scores, float(np.mean(diag - lse))


def infonce_estimate(task: MITask, config: InfoNCEConfig) -> MIEstimate:
    """Critic-based InfoNCE lower bound with in-batch negatives.

    Two MLP encoders feed a dot-product score (a bilinear critic over
    learned features). The returned value is the bound averaged over
    held-out batches and can never exceed ln(batch_k).
    """
    start = time.perf_counter()
    rng_data = substream(config.seed, "infonce", "data")
    rng_init = substream(config.seed, "infonce", "init")
    rng_batch = substream(config.seed, "infonce", "batch")

    x_train, y_train = task.sample_joint(rng_data, config.train_samples)
    x_test, y_test = task.sample_joint(rng_data, config.test_samples)
    ye_train = _encode_infonce_y(task, y_train)
    ye_test = _encode_infonce_y(task, y_test)

    acts = (config.activation,) * len(config.hidden) + ("identity",)
    g_net = nn.init_dense_net(
        (x_train.shape[1],) + config.hidden + (config.embed_dim,), acts, rng_init
    )
    h_net = nn.init_dense_net(
        (ye_train.shape[1],) + config.hidden + (config.embed_dim,), acts, rng_init
    )
    n_g = g_net.n_params
    params = np.concatenate([nn.params_flat(g_net), nn.params_flat(h_net)])
    state = nn.init_optimizer(
        params.size,
        lr=config.lr,
        weight_decay=config.weight_decay,
        clip_norm=config.clip_norm,
    )

    k = config.batch_k
    for step in range(config.steps):
        idx = rng_batch.integers(0, config.train_samples, size=k)
        gx, g_cache = nn.forward_cached(g_net, x_train[idx])
        hy, h_cache = nn.forward_cached(h_net, ye_train[idx])
        scores, bound = _nce_bound_terms(gx, hy)
        if not math.isfinite(bound):
            raise NumericalError(f"InfoNCE training diverged at step {step}")
        # d(-bound)/dS = (softmax_rows - I) / k
        m = scores.max(axis=1, keepdims=True)
        p = np.exp(scores - m)
        p /= p.sum(axis=1, keepdims=True)
        d_scores = (p - np.eye(k)) / k
        g_grads, _ = nn.backward(g_net, g_cache, d_scores @ hy)
        h_grads, _ = nn.backward(h_net, h_cache, d_scores.T @ gx)
        lr_t = config.lr * min(1.0, (step + 1) / max(1, config.warmup_steps))
        params, state = nn.adamw_flat(
            params, np.concatenate([g_grads, h_grads]), state, lr=lr_t
        )
        g_net = nn.with_params(g_net, params[:n_g])
        h_net = nn.with_params(h_net, params[n_g:])

    n_batches = config.test_samples // k
    if n_batches < 1:
        raise ConfigError("test_samples must cover at least one evaluation batch")
    bounds = np.empty(n_batches)
    for b in range(n_batches):
        sl = slice(b * k, (b + 1) * k)
        gx = nn.forward(g_net, x_test[sl])
        hy = nn.forward(h_net, ye_test[sl])
        _, term = _nce_bound_terms(gx, hy)
        bounds[b] = term + np.log(k)
    value = float(bounds.mean())
    stderr = float(bounds.std(ddof=1) / np.sqrt(n_batches)) if n_batches > 1 else 0.0
    return MIEstimate(
        value=value,
        stderr=stderr,
        n_y=n_batches * k,
        n_t=1,
        n_x=k,
        seed=config.seed,
        wall_time_s=time.perf_counter() - start,
        estimator_tag="infonce",
        mode="held-out",
        t_eps=float("nan"),
        w=float("nan"),
        time_sampling="n/a",
    )


# ---------------------------------------------------------------------------
# Benchmark runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchConfig:
    master_seed: int = 0
    n_bins: int = 32
    train_pool: int = 50_000  # distinct joint samples available for training
    train_iterations: int = 12_000
    train_batch_size: int = 256
    train_lr: float = 1e-3
    estimate_n_y: int = 5_000  # held-out joint draws (the test budget)
    estimate_n_t: int = 24
    estimate_n_x: int = 1
    estimate_t_eps: float = 0.99
    estimate_w: float = 1.0
    estimate_steps: int = 100
    time_sampling: str = "importance"
    infonce: InfoNCEConfig = field(default_factory=InfoNCEConfig)
    workers: int = 1


@dataclass(frozen=True)
class BenchRow:
    task_id: str
    estimator_tag: str
    estimate: float
    stderr: float
    true_mi: float
    bias: float
    seed: int
    wall_time_s: float
    status: str = "ok"
    error: str = ""

    CSV_COLUMNS = (
        "task_id", "estimator_tag", "estimate", "stderr", "true_mi",
        "bias", "seed", "wall_time_s", "status", "error",
    )

    def to_dict(self) -> dict:
        return {c: getattr(self, c) for c in self.CSV_COLUMNS}


@dataclass
class BenchReport:
    master_seed: int
    rows: list

    def to_json_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "master_seed": self.master_seed,
            "rows": [r.to_dict() for r in self.rows],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    @classmethod
    def from_json_dict(cls, doc: dict) -> "BenchReport":
        if doc.get("format_version") != REPORT_FORMAT_VERSION:
            raise ConfigError(
                f"unsupported report format_version {doc.get('format_version')!r}"
            )
        rows = [BenchRow(**row) for row in doc["rows"]]
        return cls(master_seed=doc["master_seed"], rows=rows)

    def write_csv(self, path) -> None:
        lines = [",".join(BenchRow.CSV_COLUMNS)]
        for r in self.rows:
            cells = []
            for c in BenchRow.CSV_COLUMNS:
                v = getattr(r, c)
                cells.append(repr(v) if isinstance(v, float) else str(v))
            lines.append(",".join(cells))
        Path(path).write_text("\n".join(lines) + "\n")

    def write_heatmap_csv(self, path) -> None:
        """Bias as a task-by-estimator matrix (the heatmap as data)."""
        tasks = list(dict.fromkeys(r.task_id for r in self.rows))
        tags = list(dict.fromkeys(r.estimator_tag for r in self.rows))
        cell = {(r.task_id, r.estimator_tag): r.bias for r in self.rows}
        lines = ["task_id," + ",".join(tags)]
        for tid in tasks:
            vals = [repr(cell.get((tid, tag), float("nan"))) for tag in tags]
            lines.append(f"{tid}," + ",".join(vals))
        Path(path).write_text("\n".join(lines) + "\n")


def _cell_seeds(master_seed: int, task_id: str, tag: str):
    ss = seed_sequence(master_seed, "bench", task_id, tag)
    train_seed, est_seed = (int(v) for v in ss.generate_state(2))
    return train_seed, est_seed


def run_cell(master_seed: int, task: MITask, tag: str, config: BenchConfig) -> BenchRow:
    """One (task, estimator) cell; failures are captured in the row."""
    start = time.perf_counter()
    train_seed, est_seed = _cell_seeds(master_seed, task.task_id, tag)
    try:
        if tag == "infonce":
            est = infonce_estimate(task, replace(config.infonce, seed=est_seed))
        elif tag in ("rfmi-data-coupled", "rfmi-trajectory", "rfmi-oracle"):
            view = FlowTaskView(task, config.n_bins)
            if tag == "rfmi-oracle":
                if task.analytic is None:
                    raise ConfigError(
                        f"task {task.task_id} has no analytic oracle "
                        "(only gaussian-mixture-label tasks do)"
                    )
                source = task.analytic
                data = task.analytic
                mode = "data-coupled"
            else:
                train_cfg = TrainConfig(
                    iterations=config.train_iterations,
                    batch_size=config.train_batch_size,
                    lr=config.train_lr,
                    seed=train_seed,
                )
                pool = PooledSampler(view, config.train_pool, substream(train_seed, "pool"))
                source, _ = train_flow(pool, train_cfg)
                data = view
                mode = tag.removeprefix("rfmi-")
            est = mi_estimate(
                source,
                data,
                n_y=config.estimate_n_y,
                n_t=config.estimate_n_t,
                n_x=config.estimate_n_x,
                mode=mode,
                t_eps=config.estimate_t_eps,
                w=config.estimate_w,
                time_sampling=config.time_sampling,
                steps=config.estimate_steps,
                seed=est_seed,
            )
        else:
            raise ConfigError(f"unknown estimator tag {tag!r}; expected one of {ESTIMATOR_TAGS}")
    except FlowMIError as exc:
        wall = time.perf_counter() - start
        return BenchRow(
            task_id=task.task_id,
            estimator_tag=tag,
            estimate=float("nan"),
            stderr=float("nan"),
            true_mi=task.true_mi,
            bias=float("nan"),
            seed=est_seed,
            wall_time_s=wall,
            status="error",
            error=f"{type(exc).__name__}: {exc}",
        )
    wall = time.perf_counter() - start
    return BenchRow(
        task_id=task.task_id,
        estimator_tag=tag,
        estimate=est.value,
        stderr=est.stderr,
        true_mi=task.true_mi,
        bias=est.value - task.true_mi,
        seed=est.seed,
        wall_time_s=wall,
    )


def _run_cell_args(args) -> BenchRow:
    return run_cell(*args)


def run_benchmark(tasks, estimators, config: BenchConfig) -> BenchReport:
    """All (task, estimator) cells, deterministic under the master seed.

    Cells are independent jobs with RNG streams derived from (master seed,
    task_id, estimator_tag), so the report is identical for any worker
    count. Rows come back in task-major order.
    """
    tasks = list(tasks)
    estimators = list(estimators)
    if not tasks:
        raise ConfigError("benchmark needs at least one task")
    if not estimators:
        raise ConfigError("benchmark needs at least one estimator")
    for tag in estimators:
        if tag not in ESTIMATOR_TAGS:
            raise ConfigError(f"unknown estimator tag {tag!r}; expected one of {ESTIMATOR_TAGS}")
    jobs = [(config.master_seed, task, tag, config) for task in tasks for tag in estimators]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(_run_cell_args, jobs))
    else:
        rows = [run_cell(*job) for job in jobs]
    return BenchReport(master_seed=config.master_seed, rows=rows)
