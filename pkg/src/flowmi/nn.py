"""Minimal dense feed-forward networks with exact reverse-mode gradients.

Everything is float64 numpy. Networks are plain containers of arrays and
are treated as immutable values: an optimizer step returns a new network.
Parameters are addressed as one flat vector (layer by layer, weights then
bias) so gradient checks, optimizer state and serialization all share a
single layout.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalError

ACTIVATIONS = ("tanh", "relu", "identity")

NET_FORMAT_VERSION = 1


def _apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "identity":
        return z
    raise ConfigError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def _activation_grad(name: str, z: np.ndarray) -> np.ndarray:
    # derivative w.r.t. the pre-activation z
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "identity":
        return np.ones_like(z)
    raise ConfigError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


@dataclass(frozen=True)
class DenseNet:
    """Fully connected network: weights[i] has shape (out_i, in_i)."""

    weights: tuple
    biases: tuple
    activations: tuple

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ConfigError("weights, biases and activations must have equal length")
        for i, (w, b, a) in enumerate(zip(self.weights, self.biases, self.activations)):
            if a not in ACTIVATIONS:
                raise ConfigError(f"layer {i}: unknown activation {a!r}")
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ConfigError(
                    f"layer {i}: weight shape {w.shape} incompatible with bias shape {b.shape}"
                )
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ConfigError(
                    f"layer {i}: input dim {w.shape[1]} does not compose with "
                    f"previous output dim {self.weights[i - 1].shape[0]}"
                )

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def layer_dims(self) -> tuple:
        return (self.input_dim,) + tuple(w.shape[0] for w in self.weights)


def init_dense_net(layer_dims, activations, rng: np.random.Generator) -> DenseNet:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    dims = list(layer_dims)
    if len(dims) < 2:
        raise ConfigError("need at least input and output dims")
    acts = tuple(activations)
    if len(acts) != len(dims) - 1:
        raise ConfigError(
            f"expected {len(dims) - 1} activations for {len(dims)} layer dims, got {len(acts)}"
        )
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(tuple(weights), tuple(biases), acts)


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    out, _ = forward_cached(net, x, keep_cache=False)
    return out


def forward_cached(net: DenseNet, x: np.ndarray, keep_cache: bool = True):
    """Forward pass returning (output, cache) for a later backward pass.

    The cache stores each layer's input and pre-activation.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.ndim != 2 or h.shape[1] != net.input_dim:
        raise ConfigError(
            f"input shape {x.shape} does not match network input dim {net.input_dim}"
        )
    cache = [] if keep_cache else None
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = h @ w.T + b
        if keep_cache:
            cache.append((h, z))
        h = _apply_activation(act, z)
    return (h[0] if single else h), cache


def backward(net: DenseNet, cache, grad_out: np.ndarray):
    """Reverse-mode pass.

    ``grad_out`` is dL/d(output) with the batch shape used in the forward
    pass. Returns (flat parameter gradient summed over the batch, dL/d(input)
    per batch row).
    """
    g = np.asarray(grad_out, dtype=np.float64)
    single = g.ndim == 1
    if single:
        g = g[None, :]
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.biases)
    for i in range(len(net.weights) - 1, -1, -1):
        h_in, z = cache[i]
        delta = g * _activation_grad(net.activations[i], z)
        grads_w[i] = delta.T @ h_in
        grads_b[i] = delta.sum(axis=0)
        g = delta @ net.weights[i]
    grad_in = g[0] if single else g
    flat = np.concatenate(
        [np.concatenate([w.ravel(), b]) for w, b in zip(grads_w, grads_b)]
    )
    return flat, grad_in


def gradient(net: DenseNet, x: np.ndarray, loss_fn):
    """Gradient of a scalar loss of the network output.

    ``loss_fn(output) -> (value, dvalue_doutput)``. Returns (value, flat
    gradient). A non-finite loss is an error; when the output has batch rows
    the first offending row index is reported.
    """
    out, cache = forward_cached(net, x)
    value, grad_out = loss_fn(out)
    if not np.isfinite(value):
        idx = None
        rows = np.atleast_2d(out)
        bad = ~np.isfinite(rows).all(axis=1)
        if bad.any():
            idx = int(np.argmax(bad))
        raise NumericalError(
            f"non-finite loss {value!r}"
            + (f" (first non-finite output at batch index {idx})" if idx is not None else "")
        )
    flat, _ = backward(net, cache, grad_out)
    return value, flat


def params_flat(net: DenseNet) -> np.ndarray:
    return np.concatenate(
        [np.concatenate([w.ravel(), b]) for w, b in zip(net.weights, net.biases)]
    )


def with_params(net: DenseNet, flat: np.ndarray) -> DenseNet:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (net.n_params,):
        raise ConfigError(f"expected {net.n_params} parameters, got shape {flat.shape}")
    weights, biases, k = [], [], 0
    for w, b in zip(net.weights, net.biases):
        weights.append(flat[k : k + w.size].reshape(w.shape).copy())
        k += w.size
        biases.append(flat[k : k + b.size].copy())
        k += b.size
    return DenseNet(tuple(weights), tuple(biases), net.activations)


# ---------------------------------------------------------------------------
# AdamW with decoupled weight decay and global gradient-norm clipping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8
    clip_norm: float | None = 1.0


def init_optimizer(n_params: int, lr: float, **kwargs) -> OptimizerState:
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    state = OptimizerState(m=np.zeros(n_params), v=np.zeros(n_params), step=0, lr=lr, **kwargs)
    if not (0.0 <= state.beta1 < 1.0 and 0.0 <= state.beta2 < 1.0):
        raise ConfigError("beta1 and beta2 must lie in [0, 1)")
    if state.clip_norm is not None and state.clip_norm <= 0:
        raise ConfigError("clip_norm must be positive or None")
    return state


def clip_global_norm(grads: np.ndarray, max_norm: float | None):
    """Scale grads so the global L2 norm is at most max_norm."""
    norm = float(np.linalg.norm(grads))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    return grads * (max_norm / norm), norm


def adamw_flat(params: np.ndarray, grads: np.ndarray, state: OptimizerState, lr: float | None = None):
    """One AdamW step on a flat parameter vector.

    Decay is decoupled (applied to the parameters, not folded into the
    gradient) and clipping happens before the moment update. ``lr`` may be
    supplied per call to implement warmup without rebuilding state.
    """
    if not np.all(np.isfinite(grads)):
        raise NumericalError("non-finite gradient passed to adamw step")
    eta = state.lr if lr is None else lr
    if eta <= 0:
        raise ConfigError(f"learning rate must be positive, got {eta}")
    p = params * (1.0 - eta * state.weight_decay)
    g, _ = clip_global_norm(grads, state.clip_norm)
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    step = state.step + 1
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    p = p - eta * m_hat / (np.sqrt(v_hat) + state.eps)
    return p, replace(state, m=m, v=v, step=step)


def adamw_step(net: DenseNet, grads: np.ndarray, state: OptimizerState, lr: float | None = None):
    """AdamW step at the network level; returns (new net, new state)."""
    p, new_state = adamw_flat(params_flat(net), grads, state, lr=lr)
    return with_params(net, p), new_state


# ---------------------------------------------------------------------------
# Serialization (versioned JSON, bit-exact round trip)
# ---------------------------------------------------------------------------


def encode_array(a: np.ndarray) -> str:
    """Base64 of the little-endian float64 bytes; round-trips bit-exactly."""
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def decode_array(s: str, shape=None) -> np.ndarray:
    a = np.frombuffer(base64.b64decode(s.encode("ascii")), dtype="<f8").astype(np.float64)
    return a if shape is None else a.reshape(shape)


def net_to_dict(net: DenseNet, rng_seed=None) -> dict:
    return {
        "format_version": NET_FORMAT_VERSION,
        "kind": "dense-net",
        "dims": list(net.layer_dims),
        "activations": list(net.activations),
        "params": encode_array(params_flat(net)),
        "rng_seed": rng_seed,
    }


def net_from_dict(doc: dict) -> DenseNet:
    version = doc.get("format_version")
    if version != NET_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported dense-net format_version {version!r}, expected {NET_FORMAT_VERSION}"
        )
    dims = doc["dims"]
    acts = tuple(doc["activations"])
    zero = np.random.default_rng(0)
    skeleton = init_dense_net(dims, acts, zero)
    flat = decode_array(doc["params"])
    return with_params(skeleton, flat)


def save_net(net: DenseNet, path, rng_seed=None) -> None:
    Path(path).write_text(json.dumps(net_to_dict(net, rng_seed=rng_seed), indent=1))


def load_net(path) -> DenseNet:
    return net_from_dict(json.loads(Path(path).read_text()))
