"""Conditional rectified flow: CFM training, CFG combination, Euler sampling.

A FlowModel wraps a dense net u(x, y, t) together with a condition codec.
The codec maps a condition value (or the null condition) to a learned
embedding; the net consumes [x, embedding, time features]. Training
regresses the net onto the straight-path target x1 - x0 at interpolated
points t*x1 + (1-t)*x0, masking conditions to null with probability
p_uncond so the same net also learns the unconditional velocity.

Any object exposing ``guided_velocity(x, y, t)`` and
``unconditional_velocity(x, t)`` (batched over rows of x) works as a
velocity source for sampling and estimation; FlowModel and the analytic
oracle task both qualify.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, NumericalError
from .seeding import substream

TIME_FREQS = (1.0, 2.0, 4.0, 8.0)

MODEL_FORMAT_VERSION = 1


def time_features(t, n: int | None = None) -> np.ndarray:
    """Fixed sinusoidal features of t: [t, sin/cos(pi f t) for f in FREQS].

    Half-period base so the features separate t = 0 from t = 1; the
    velocity field differs most at the path endpoints.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if n is not None and t.shape == (1,):
        t = np.full(n, t[0])
    cols = [t]
    for f in TIME_FREQS:
        cols.append(np.sin(np.pi * f * t))
        cols.append(np.cos(np.pi * f * t))
    return np.stack(cols, axis=1)


N_TIME_FEATURES = 1 + 2 * len(TIME_FREQS)


def path_point(x0, x1, t):
    """Straight interpolation t*x1 + (1-t)*x0 between source and target."""
    t = np.asarray(t, dtype=np.float64)
    tt = t[:, None] if t.ndim == 1 else t
    return tt * x1 + (1.0 - tt) * x0


# ---------------------------------------------------------------------------
# Condition codecs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteCodec:
    """One learned embedding per condition value plus a separate null vector."""

    values: tuple
    embedding: np.ndarray  # (K, e)
    null: np.ndarray  # (e,)

    def __post_init__(self):
        if len(self.values) != self.embedding.shape[0]:
            raise ConfigError("embedding rows must match number of condition values")
        if self.null.shape != (self.embedding.shape[1],):
            raise ConfigError("null vector and embeddings must share the embedding dim")

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[1]

    def _indices(self, y) -> np.ndarray:
        vals = np.asarray(self.values)
        y = np.atleast_1d(np.asarray(y))
        idx = np.searchsorted(vals, y)
        idx_c = np.clip(idx, 0, len(vals) - 1)
        if np.any(vals[idx_c] != y):
            bad = y[vals[idx_c] != y][0]
            raise ConfigError(f"unknown condition value {bad!r}")
        return idx_c

    def encode(self, y, n: int, null_mask=None) -> np.ndarray:
        if y is None:
            return np.tile(self.null, (n, 1))
        idx = self._indices(y)
        if idx.shape == (1,) and n > 1:
            idx = np.full(n, idx[0])
        emb = self.embedding[idx]
        if null_mask is not None:
            emb = np.where(null_mask[:, None], self.null, emb)
        return emb

    def flat(self) -> np.ndarray:
        return np.concatenate([self.embedding.ravel(), self.null])

    def with_flat(self, flat: np.ndarray) -> "DiscreteCodec":
        k = self.embedding.size
        return replace(
            self,
            embedding=flat[:k].reshape(self.embedding.shape).copy(),
            null=flat[k:].copy(),
        )

    def grads(self, y, null_mask, grad_emb: np.ndarray) -> np.ndarray:
        g_table = np.zeros_like(self.embedding)
        g_null = np.zeros_like(self.null)
        if null_mask is None:
            null_mask = np.zeros(grad_emb.shape[0], dtype=bool)
        idx = self._indices(y)
        if idx.shape == (1,) and grad_emb.shape[0] > 1:
            idx = np.full(grad_emb.shape[0], idx[0])
        live = ~null_mask
        np.add.at(g_table, idx[live], grad_emb[live])
        g_null += grad_emb[null_mask].sum(axis=0)
        return np.concatenate([g_table.ravel(), g_null])


@dataclass(frozen=True)
class ContinuousCodec:
    """Linear encoder for vector-valued conditions plus a learned null vector."""

    weight: np.ndarray  # (e, k)
    bias: np.ndarray  # (e,)
    null: np.ndarray  # (e,)

    @property
    def embed_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def condition_dim(self) -> int:
        return self.weight.shape[1]

    def _rows(self, y, n: int) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1 and y.shape[0] == self.condition_dim:
            y = y[None, :]
        if y.ndim != 2 or y.shape[1] != self.condition_dim:
            raise ConfigError(
                f"condition shape {y.shape} does not match condition dim {self.condition_dim}"
            )
        if y.shape[0] == 1 and n > 1:
            y = np.broadcast_to(y, (n, self.condition_dim))
        return y

    def encode(self, y, n: int, null_mask=None) -> np.ndarray:
        if y is None:
            return np.tile(self.null, (n, 1))
        rows = self._rows(y, n)
        emb = rows @ self.weight.T + self.bias
        if null_mask is not None:
            emb = np.where(null_mask[:, None], self.null, emb)
        return emb

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias, self.null])

    def with_flat(self, flat: np.ndarray) -> "ContinuousCodec":
        k = self.weight.size
        e = self.bias.size
        return replace(
            self,
            weight=flat[:k].reshape(self.weight.shape).copy(),
            bias=flat[k : k + e].copy(),
            null=flat[k + e :].copy(),
        )

    def grads(self, y, null_mask, grad_emb: np.ndarray) -> np.ndarray:
        n = grad_emb.shape[0]
        if null_mask is None:
            null_mask = np.zeros(n, dtype=bool)
        rows = self._rows(y, n)
        live = ~null_mask
        g_w = grad_emb[live].T @ rows[live]
        g_b = grad_emb[live].sum(axis=0)
        g_null = grad_emb[null_mask].sum(axis=0)
        return np.concatenate([g_w.ravel(), g_b, g_null])


# ---------------------------------------------------------------------------
# FlowModel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowModel:
    net: nn.DenseNet
    codec: object
    data_dim: int
    p_uncond: float = 0.1

    is_exact_velocity = False

    def __post_init__(self):
        if not (0.0 <= self.p_uncond < 1.0):
            raise ConfigError(f"p_uncond must lie in [0, 1), got {self.p_uncond}")
        if self.net.output_dim != self.data_dim:
            raise ConfigError(
                f"net output dim {self.net.output_dim} must equal data_dim {self.data_dim}"
            )

    # -- parameter vector (net followed by codec) --

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([nn.params_flat(self.net), self.codec.flat()])

    def with_params(self, flat: np.ndarray) -> "FlowModel":
        k = self.net.n_params
        return replace(
            self,
            net=nn.with_params(self.net, flat[:k]),
            codec=self.codec.with_flat(flat[k:]),
        )

    # -- velocities --

    def _rows(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.data_dim:
            raise ConfigError(f"state shape {x.shape} does not match data_dim {self.data_dim}")
        return x

    def _velocity(self, x, y, t, null_mask=None) -> np.ndarray:
        rows = self._rows(x)
        n = rows.shape[0]
        emb = self.codec.encode(y, n, null_mask)
        feats = np.concatenate([rows, emb, time_features(t, n)], axis=1)
        out = nn.forward(self.net, feats)
        return out if np.asarray(x).ndim == 2 else out[0]

    def guided_velocity(self, x, y, t) -> np.ndarray:
        return self._velocity(x, y, t)

    def unconditional_velocity(self, x, t) -> np.ndarray:
        return self._velocity(x, None, t)

    def cfg_velocity(self, x, y, t, w: float) -> np.ndarray:
        return combined_velocity(self, x, y, t, w)


def combined_velocity(source, x, y, t, w: float) -> np.ndarray:
    """CFG combination u_null + w * (u_guided - u_null) for any source."""
    if w < 0:
        raise ConfigError(f"guidance scale must be >= 0, got {w}")
    if w == 1.0:
        return source.guided_velocity(x, y, t)
    u_null = source.unconditional_velocity(x, t)
    if w == 0.0:
        return u_null
    u_y = source.guided_velocity(x, y, t)
    return u_null + w * (u_y - u_null)


# ---------------------------------------------------------------------------
# CFM loss and training
# ---------------------------------------------------------------------------


def _check_t(t: np.ndarray) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any((t < 0.0) | (t >= 1.0)):
        raise ConfigError("training times must lie in [0, 1)")
    return t


def draw_null_mask(rng: np.random.Generator, n: int, p_uncond: float) -> np.ndarray:
    """Per-element condition dropout mask used during CFM training."""
    return rng.uniform(size=n) < p_uncond


def _cfm_loss_grads(model: FlowModel, x0, x1, y, t, null_mask):
    """Mean squared CFM residual and its gradient w.r.t. model.params."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t = _check_t(t)
    n = x0.shape[0]
    xt = path_point(x0, x1, t)
    target = x1 - x0
    emb = model.codec.encode(y, n, null_mask)
    feats = np.concatenate([xt, emb, time_features(t, n)], axis=1)
    out, cache = nn.forward_cached(model.net, feats)
    resid = out - target
    per_element = np.sum(resid * resid, axis=1)
    if not np.all(np.isfinite(per_element)):
        idx = int(np.argmax(~np.isfinite(per_element)))
        raise NumericalError(f"non-finite CFM loss at batch index {idx}")
    loss = float(per_element.mean())
    grad_out = 2.0 * resid / n
    net_grads, grad_in = nn.backward(model.net, cache, grad_out)
    grad_emb = grad_in[:, model.data_dim : model.data_dim + model.codec.embed_dim]
    codec_grads = model.codec.grads(y, null_mask, grad_emb)
    return loss, np.concatenate([net_grads, codec_grads])


def cfm_loss(model: FlowModel, x0, x1, y, t, null_mask=None, rng=None) -> float:
    """Conditional flow-matching loss on one batch.

    Conditions are masked to null per element: pass an explicit ``null_mask``
    or an ``rng`` from which the mask is drawn with probability p_uncond.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if null_mask is None:
        if rng is not None:
            null_mask = draw_null_mask(rng, x0.shape[0], model.p_uncond)
        else:
            null_mask = np.zeros(x0.shape[0], dtype=bool)
    loss, _ = _cfm_loss_grads(model, x0, x1, y, t, null_mask)
    return loss


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    batch_size: int = 256
    lr: float = 1e-3
    warmup_steps: int = 400
    p_uncond: float = 0.1
    seed: int = 0
    clip_norm: float = 1.0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: tuple = (128, 128, 128)
    activation: str = "tanh"
    embed_dim: int = 8
    # EMA of the parameters; the returned model carries the averaged weights,
    # which removes most of the constant-lr parameter wobble. 0 disables.
    ema_decay: float = 0.999

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if not (0.0 <= self.p_uncond < 1.0):
            raise ConfigError(f"p_uncond must lie in [0, 1), got {self.p_uncond}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")


@dataclass
class TrainLog:
    iteration: np.ndarray
    loss: np.ndarray
    lr: np.ndarray
    wall_time_s: np.ndarray

    def write_csv(self, path) -> None:
        lines = ["iteration,loss,lr,wall_time_s"]
        for i, lo, lr, wt in zip(self.iteration, self.loss, self.lr, self.wall_time_s):
            lines.append(f"{int(i)},{lo!r},{lr!r},{wt:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")


def _build_codec(sampler, embed_dim: int, rng: np.random.Generator):
    values = getattr(sampler, "condition_values", None)
    if values is not None:
        k = len(values)
        embedding = 0.1 * rng.standard_normal((k, embed_dim))
        locations = getattr(sampler, "condition_locations", None)
        if locations is not None:
            # conditions carry a natural ordering (e.g. quantile bins):
            # seed the first coordinate with the standardized locations so
            # nearby conditions start with nearby embeddings
            loc = np.asarray(locations, dtype=np.float64)
            loc = (loc - loc.mean()) / max(loc.std(), 1e-12)
            embedding[:, 0] = loc
        return DiscreteCodec(
            values=tuple(values),
            embedding=embedding,
            null=0.1 * rng.standard_normal(embed_dim),
        )
    cond_dim = getattr(sampler, "condition_dim", None)
    if cond_dim is None:
        raise ConfigError(
            "sampler must expose condition_values (discrete) or condition_dim (continuous)"
        )
    bound = np.sqrt(6.0 / (cond_dim + embed_dim))
    return ContinuousCodec(
        weight=rng.uniform(-bound, bound, size=(embed_dim, cond_dim)),
        bias=np.zeros(embed_dim),
        null=0.1 * rng.standard_normal(embed_dim),
    )


def _warmup_lr(base: float, warmup: int, step: int) -> float:
    if warmup <= 0:
        return base
    return base * min(1.0, (step + 1) / warmup)


def train_flow(sampler, config: TrainConfig, log_path=None):
    """Train a conditional flow on joint samples from ``sampler``.

    The sampler provides ``data_dim``, ``sample_joint(rng, n) -> (x1, y)``
    and either ``condition_values`` or ``condition_dim``. Returns (model,
    TrainLog); aborts with the last ten losses if training diverges.
    """
    d = sampler.data_dim
    rng_init = substream(config.seed, "flow", "init")
    rng_batch = substream(config.seed, "flow", "batch")

    codec = _build_codec(sampler, config.embed_dim, rng_init)
    in_dim = d + codec.embed_dim + N_TIME_FEATURES
    dims = (in_dim,) + tuple(config.hidden) + (d,)
    acts = (config.activation,) * len(config.hidden) + ("identity",)
    net = nn.init_dense_net(dims, acts, rng_init)
    model = FlowModel(net=net, codec=codec, data_dim=d, p_uncond=config.p_uncond)

    params = model.params
    state = nn.init_optimizer(
        params.size,
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        weight_decay=config.weight_decay,
        eps=config.eps,
        clip_norm=config.clip_norm,
    )

    its = np.arange(config.iterations)
    losses = np.empty(config.iterations)
    lrs = np.empty(config.iterations)
    walls = np.empty(config.iterations)
    start = time.perf_counter()
    ema = params.copy()

    for it in range(config.iterations):
        x1, y = sampler.sample_joint(rng_batch, config.batch_size)
        x0 = rng_batch.standard_normal((config.batch_size, d))
        t = rng_batch.uniform(0.0, 1.0, size=config.batch_size)
        mask = draw_null_mask(rng_batch, config.batch_size, config.p_uncond)
        loss, grads = _cfm_loss_grads(model, x0, x1, y, t, mask)
        if not np.isfinite(loss) or loss > 1e6:
            recent = losses[max(0, it - 10) : it].tolist() + [loss]
            raise NumericalError(
                f"training diverged at iteration {it}; last losses: "
                + ", ".join(f"{v:.4g}" for v in recent)
            )
        lr_t = _warmup_lr(config.lr, config.warmup_steps, it)
        params, state = nn.adamw_flat(params, grads, state, lr=lr_t)
        model = model.with_params(params)
        if config.ema_decay > 0.0:
            # bias-corrected EMA so early iterates do not drag the average
            decay = min(config.ema_decay, (it + 1.0) / (it + 10.0))
            ema += (1.0 - decay) * (params - ema)
        losses[it] = loss
        lrs[it] = lr_t
        walls[it] = time.perf_counter() - start

    if config.ema_decay > 0.0:
        model = model.with_params(ema)
    log = TrainLog(iteration=its, loss=losses, lr=lrs, wall_time_s=walls)
    if log_path is not None:
        log.write_csv(log_path)
    return model, log


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def euler_sample_batch(source, y, n: int, steps: int, w: float = 1.0, rng=None, x0=None):
    """n Euler trajectories from t=0 to t=1; returns the (n, d) endpoints."""
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if x0 is None:
        d = getattr(source, "data_dim")
        x = rng.standard_normal((n, d))
    else:
        x = np.array(x0, dtype=np.float64, copy=True)
    dt = 1.0 / steps
    for k in range(steps):
        t = k * dt
        x = x + combined_velocity(source, x, y, t, w) * dt
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite ODE state at step {k} (t = {t:.4f})")
    return x


def euler_sample(source, y, steps: int, w: float = 1.0, rng=None, x0=None):
    """Single trajectory endpoint; wrapper over the batched sampler."""
    x0_row = None if x0 is None else np.asarray(x0, dtype=np.float64)[None, :]
    return euler_sample_batch(source, y, 1, steps, w=w, rng=rng, x0=x0_row)[0]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _codec_to_dict(codec) -> dict:
    if isinstance(codec, DiscreteCodec):
        return {
            "kind": "discrete",
            "values": [int(v) for v in codec.values],
            "embedding": nn.encode_array(codec.embedding),
            "embedding_shape": list(codec.embedding.shape),
            "null": nn.encode_array(codec.null),
        }
    if isinstance(codec, ContinuousCodec):
        return {
            "kind": "continuous",
            "weight": nn.encode_array(codec.weight),
            "weight_shape": list(codec.weight.shape),
            "bias": nn.encode_array(codec.bias),
            "null": nn.encode_array(codec.null),
        }
    raise ConfigError(f"cannot serialize codec of type {type(codec).__name__}")


def _codec_from_dict(doc: dict):
    kind = doc.get("kind")
    if kind == "discrete":
        return DiscreteCodec(
            values=tuple(doc["values"]),
            embedding=nn.decode_array(doc["embedding"], tuple(doc["embedding_shape"])),
            null=nn.decode_array(doc["null"]),
        )
    if kind == "continuous":
        return ContinuousCodec(
            weight=nn.decode_array(doc["weight"], tuple(doc["weight_shape"])),
            bias=nn.decode_array(doc["bias"]),
            null=nn.decode_array(doc["null"]),
        )
    raise ConfigError(f"unknown codec kind {kind!r}")


def model_to_dict(model: FlowModel, rng_seed=None) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": "flow-model",
        "data_dim": model.data_dim,
        "p_uncond": model.p_uncond,
        "net": nn.net_to_dict(model.net),
        "codec": _codec_to_dict(model.codec),
        "rng_seed": rng_seed,
    }


def model_from_dict(doc: dict) -> FlowModel:
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported flow-model format_version {version!r}, "
            f"expected {MODEL_FORMAT_VERSION}"
        )
    return FlowModel(
        net=nn.net_from_dict(doc["net"]),
        codec=_codec_from_dict(doc["codec"]),
        data_dim=int(doc["data_dim"]),
        p_uncond=float(doc["p_uncond"]),
    )


def save_model(model: FlowModel, path, rng_seed=None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, rng_seed=rng_seed), indent=1))


def load_model(path) -> FlowModel:
    return model_from_dict(json.loads(Path(path).read_text()))
