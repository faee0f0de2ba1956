"""MI-guided self-supervised fine-tuning at toy scale.

Per condition the model generates a pool of M samples with their point-wise
MI (fused in one Euler loop), keeps the top k, and continues CFM training
on the kept (sample, condition) pairs with fresh source noise each step.
Alignment is scored against a task's closed-form posterior: the mean
probability the task assigns to the conditioning label given a generated
sample.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, NumericalError
from .flow import FlowModel, TrainConfig, _cfm_loss_grads, euler_sample_batch
from .mi import pointwise_mi_batch
from .seeding import substream

FINETUNE_SET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FineTuneEntry:
    condition: object
    sample: np.ndarray
    pointwise_mi: float
    gen_index: int


@dataclass(frozen=True)
class FineTuneSet:
    entries: tuple
    pool_size: int  # M
    keep: int  # k
    seed: int
    pools: dict | None = None  # per-condition (samples, mi) audit, not serialized

    def conditions(self) -> list:
        seen = []
        for e in self.entries:
            if e.condition not in seen:
                seen.append(e.condition)
        return seen

    def per_condition_count(self) -> dict:
        counts = {}
        for e in self.entries:
            counts[e.condition] = counts.get(e.condition, 0) + 1
        return counts

    def training_arrays(self):
        x = np.stack([e.sample for e in self.entries])
        y = np.asarray([e.condition for e in self.entries])
        return x, y

    def to_dict(self) -> dict:
        return {
            "format_version": FINETUNE_SET_FORMAT_VERSION,
            "pool_size": self.pool_size,
            "keep": self.keep,
            "seed": self.seed,
            "entries": [
                {
                    "condition": int(e.condition),
                    "sample": [float(v) for v in e.sample],
                    "pointwise_mi": e.pointwise_mi,
                    "gen_index": e.gen_index,
                }
                for e in self.entries
            ],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, doc: dict) -> "FineTuneSet":
        if doc.get("format_version") != FINETUNE_SET_FORMAT_VERSION:
            raise ConfigError(
                f"unsupported finetune-set format_version {doc.get('format_version')!r}"
            )
        entries = tuple(
            FineTuneEntry(
                condition=e["condition"],
                sample=np.asarray(e["sample"], dtype=np.float64),
                pointwise_mi=float(e["pointwise_mi"]),
                gen_index=int(e["gen_index"]),
            )
            for e in doc["entries"]
        )
        return cls(entries, doc["pool_size"], doc["keep"], doc["seed"])


def build_finetune_set(
    source,
    conditions,
    pool_size: int,
    keep: int,
    *,
    steps: int = 100,
    w: float = 4.5,
    w_step: float | None = None,
    t_eps: float = 0.99,
    seed: int = 0,
    keep_pools: bool = False,
) -> FineTuneSet:
    """Generate M samples per condition, retain the top k by point-wise MI.

    Ties break toward the lower generation index, so selection is
    deterministic given the seed.
    """
    if keep < 1 or pool_size < keep:
        raise ConfigError(f"need pool_size >= keep >= 1, got M={pool_size}, k={keep}")
    entries = []
    pools = {}
    for y in conditions:
        rng = substream(seed, "finetune", "pool", int(y))
        try:
            xs, mis = pointwise_mi_batch(
                source, y, pool_size, steps=steps, w=w, w_step=w_step, t_eps=t_eps, rng=rng
            )
        except NumericalError as exc:
            raise NumericalError(f"generation failed for condition {y!r}: {exc}") from exc
        order = np.lexsort((np.arange(pool_size), -mis))
        for j in order[:keep]:
            entries.append(
                FineTuneEntry(
                    condition=y,
                    sample=xs[j].copy(),
                    pointwise_mi=float(mis[j]),
                    gen_index=int(j),
                )
            )
        if keep_pools:
            pools[y] = (xs, mis)
    return FineTuneSet(
        entries=tuple(entries),
        pool_size=pool_size,
        keep=keep,
        seed=seed,
        pools=pools if keep_pools else None,
    )


@dataclass(frozen=True)
class FineTuneConfig:
    iterations: int = 1000
    batch_size: int = 64
    lr: float = 1e-4  # 0.1x the pre-training default
    warmup_steps: int = 400
    clip_norm: float = 1.0
    weight_decay: float = 1e-4
    seed: int = 0
    ema_decay: float = 0.999

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")


def finetune(model: FlowModel, fts: FineTuneSet, config: FineTuneConfig):
    """Continue CFM training on the selected pairs; the input model is untouched.

    Fresh source noise is drawn every step. Zero iterations or a zero
    learning rate return the model unchanged (the optimizer itself rejects
    lr <= 0, so the zero-lr contract is honored by skipping the updates).
    """
    if not fts.entries:
        raise ConfigError("fine-tuning set is empty")
    x_sel, y_sel = fts.training_arrays()
    if config.iterations == 0 or config.lr == 0.0:
        return model, None

    rng = substream(config.seed, "finetune", "train")
    params = model.params.copy()
    work = model.with_params(params)
    state = nn.init_optimizer(
        params.size,
        lr=config.lr,
        weight_decay=config.weight_decay,
        clip_norm=config.clip_norm,
    )
    losses = np.empty(config.iterations)
    ema = params.copy()
    n_pool = x_sel.shape[0]
    for it in range(config.iterations):
        idx = rng.integers(0, n_pool, size=config.batch_size)
        x1 = x_sel[idx]
        y = y_sel[idx]
        x0 = rng.standard_normal(x1.shape)
        t = rng.uniform(0.0, 1.0, size=config.batch_size)
        mask = rng.uniform(size=config.batch_size) < model.p_uncond
        loss, grads = _cfm_loss_grads(work, x0, x1, y, t, mask)
        if not np.isfinite(loss) or loss > 1e6:
            raise NumericalError(
                f"fine-tuning diverged at iteration {it}; original model preserved"
            )
        lr_t = config.lr * min(1.0, (it + 1) / max(1, config.warmup_steps))
        params, state = nn.adamw_flat(params, grads, state, lr=lr_t)
        work = work.with_params(params)
        if config.ema_decay > 0.0:
            decay = min(config.ema_decay, (it + 1.0) / (it + 10.0))
            ema += (1.0 - decay) * (params - ema)
        losses[it] = loss
    if config.ema_decay > 0.0:
        work = work.with_params(ema)
    return work, losses


def alignment_metric(
    source,
    task,
    n_per_condition: int,
    rng: np.random.Generator,
    *,
    steps: int = 100,
    w: float = 4.5,
) -> float:
    """Mean posterior probability of the conditioning label on generated samples.

    ``task`` must expose ``posterior_data(x)`` (closed-form P(y|x)) and
    ``condition_values``. Returns a value in [0, 1].
    """
    total = 0.0
    count = 0
    for y in task.condition_values:
        x = euler_sample_batch(source, y, n_per_condition, steps, w=w, rng=rng)
        post = task.posterior_data(x)
        total += float(post[:, int(y)].sum())
        count += n_per_condition
    return total / count


@dataclass
class FineTunePipelineResult:
    alignment_before: float
    alignment_after: float
    abs_difference: float
    relative_gain_pct: float
    fts: FineTuneSet
    model_before: FlowModel
    model_after: FlowModel
    selection_dominant: bool

    def summary_dict(self) -> dict:
        return {
            "alignment_before": self.alignment_before,
            "alignment_after": self.alignment_after,
            "abs_difference": self.abs_difference,
            "relative_gain_pct": self.relative_gain_pct,
            "selection_dominant": self.selection_dominant,
        }


def _selection_dominates(fts: FineTuneSet) -> bool:
    """Every kept MI >= every discarded MI, per condition."""
    if fts.pools is None:
        raise ConfigError("pipeline must build the set with keep_pools=True")
    for y in fts.conditions():
        kept = [e.pointwise_mi for e in fts.entries if e.condition == y]
        kept_idx = {e.gen_index for e in fts.entries if e.condition == y}
        _, mis = fts.pools[y]
        discarded = [m for j, m in enumerate(mis) if j not in kept_idx]
        if discarded and kept and min(kept) < max(discarded):
            return False
    return True


def run_finetune_pipeline(
    task,
    master_seed: int,
    *,
    pretrain: TrainConfig | None = None,
    model: FlowModel | None = None,
    pool_size: int = 50,
    keep: int = 1,
    passes: int = 2,
    ft_iterations: int = 1000,
    ft_lr: float | None = None,
    steps: int = 100,
    w: float = 4.5,
    t_eps: float = 0.99,
    n_metric: int = 2000,
) -> FineTunePipelineResult:
    """Full loop: (pre)train, score alignment, select by MI, fine-tune, rescore.

    The selection stage runs ``passes`` times over the condition set with
    independent pools and the kept entries are concatenated.
    """
    from .flow import train_flow  # local import to keep module import light

    if model is None:
        if pretrain is None:
            pretrain = TrainConfig(iterations=4000, seed=master_seed)
        model, _ = train_flow(task, pretrain)

    rng_before = substream(master_seed, "finetune", "metric-before")
    before = alignment_metric(model, task, n_metric, rng_before, steps=steps, w=w)

    sets = []
    for p in range(passes):
        s = build_finetune_set(
            model,
            task.condition_values,
            pool_size,
            keep,
            steps=steps,
            w=w,
            t_eps=t_eps,
            seed=int(substream(master_seed, "finetune", "pass", p).integers(2**31)),
            keep_pools=True,
        )
        sets.append(s)
    merged = FineTuneSet(
        entries=tuple(e for s in sets for e in s.entries),
        pool_size=pool_size,
        keep=keep,
        seed=master_seed,
        pools=None,
    )
    dominant = all(_selection_dominates(s) for s in sets)

    lr = 0.1 * (pretrain.lr if pretrain is not None else 1e-3) if ft_lr is None else ft_lr
    ft_cfg = FineTuneConfig(
        iterations=ft_iterations,
        lr=lr,
        seed=int(substream(master_seed, "finetune", "ft").integers(2**31)),
    )
    model_after, _ = finetune(model, merged, ft_cfg)

    rng_after = substream(master_seed, "finetune", "metric-after")
    after = alignment_metric(model_after, task, n_metric, rng_after, steps=steps, w=w)

    return FineTunePipelineResult(
        alignment_before=before,
        alignment_after=after,
        abs_difference=after - before,
        relative_gain_pct=100.0 * (after - before) / before,
        fts=merged,
        model_before=model,
        model_after=model_after,
        selection_dominant=dominant,
    )
