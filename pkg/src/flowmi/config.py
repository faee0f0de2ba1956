"""Strict JSON run configurations for the CLI.

Every subcommand takes one JSON document. Unknown keys are rejected,
missing required keys are reported by name, and each run writes the fully
resolved configuration (defaults materialized, overrides applied) next to
its outputs so it can be replayed exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .bench import BenchConfig, InfoNCEConfig, default_suite, make_task
from .errors import ConfigError
from .flow import TrainConfig

CONFIG_FORMAT_VERSION = 1


def load_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return doc


def _reject_unknown(doc: dict, allowed, where: str) -> None:
    extra = sorted(set(doc) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key {extra[0]!r} in {where}")


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"missing required field {key!r} in {where}")
    return doc[key]


def _check_version(doc: dict, where: str) -> None:
    v = doc.get("format_version", CONFIG_FORMAT_VERSION)
    if v != CONFIG_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported config format_version {v!r} in {where}; "
            f"expected {CONFIG_FORMAT_VERSION}"
        )


def parse_task(doc: dict, where: str = "task"):
    _reject_unknown(doc, {"family", "params", "task_id"}, where)
    family = _require(doc, "family", where)
    params = _require(doc, "params", where)
    return make_task(family, params, doc.get("task_id"))


_TRAIN_KEYS = {
    "iterations", "batch_size", "lr", "warmup_steps", "p_uncond", "clip_norm",
    "weight_decay", "beta1", "beta2", "eps", "hidden", "activation",
    "embed_dim", "ema_decay",
}


def parse_train(doc: dict, seed: int, where: str = "train") -> TrainConfig:
    _reject_unknown(doc, _TRAIN_KEYS, where)
    if "iterations" not in doc:
        raise ConfigError(f"missing required field 'iterations' in {where}")
    kwargs = dict(doc)
    if "hidden" in kwargs:
        kwargs["hidden"] = tuple(kwargs["hidden"])
    return TrainConfig(seed=seed, **kwargs)


_ESTIMATOR_KEYS = {"n_y", "n_t", "n_x", "mode", "t_eps", "w", "time_sampling", "tail", "steps"}

_ESTIMATOR_DEFAULTS = {
    "n_y": 4000,
    "n_t": 24,
    "n_x": 1,
    "mode": "data-coupled",
    "t_eps": 0.99,
    "w": 1.0,
    "time_sampling": "importance",
    "tail": "frozen",
    "steps": 100,
}


def parse_estimator(doc: dict, where: str = "estimator") -> dict:
    _reject_unknown(doc, _ESTIMATOR_KEYS, where)
    out = dict(_ESTIMATOR_DEFAULTS)
    out.update(doc)
    return out


_INFONCE_KEYS = {
    "batch_k", "steps", "lr", "embed_dim", "hidden", "activation",
    "train_samples", "test_samples", "weight_decay", "clip_norm", "warmup_steps",
}


def parse_infonce(doc: dict, where: str = "infonce") -> InfoNCEConfig:
    _reject_unknown(doc, _INFONCE_KEYS, where)
    kwargs = dict(doc)
    if "hidden" in kwargs:
        kwargs["hidden"] = tuple(kwargs["hidden"])
    return InfoNCEConfig(**kwargs)


_BENCH_KEYS = {
    "n_bins", "train_iterations", "train_batch_size", "train_lr",
    "estimate_n_y", "estimate_n_t", "estimate_n_x", "estimate_t_eps",
    "estimate_w", "estimate_steps", "time_sampling", "infonce",
}


def parse_bench(doc: dict, master_seed: int, workers: int, where: str = "bench") -> BenchConfig:
    _reject_unknown(doc, _BENCH_KEYS, where)
    kwargs = dict(doc)
    infonce_doc = kwargs.pop("infonce", {})
    return BenchConfig(
        master_seed=master_seed,
        workers=workers,
        infonce=parse_infonce(infonce_doc, f"{where}.infonce"),
        **kwargs,
    )


# ---------------------------------------------------------------------------
# Per-subcommand documents
# ---------------------------------------------------------------------------


@dataclass
class RunPaths:
    out_dir: Path

    def ensure(self) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir


def _common(doc: dict, overrides: dict, required: set, optional: set, where: str) -> dict:
    _check_version(doc, where)
    allowed = required | optional | {"format_version", "seed", "out_dir"}
    _reject_unknown(doc, allowed, where)
    merged = dict(doc)
    if overrides.get("seed") is not None:
        merged["seed"] = overrides["seed"]
    if overrides.get("out") is not None:
        merged["out_dir"] = overrides["out"]
    for key in required | {"out_dir"}:
        if key not in merged:
            raise ConfigError(f"missing required field {key!r} in {where}")
    merged.setdefault("seed", 0)
    if not isinstance(merged["seed"], int) or merged["seed"] < 0:
        raise ConfigError(f"'seed' must be a non-negative integer in {where}")
    return merged


def resolve_train_config(doc: dict, overrides: dict) -> dict:
    merged = _common(doc, overrides, {"task", "train"}, {"n_bins"}, "train config")
    task = parse_task(merged["task"])
    train = parse_train(merged["train"], seed=merged["seed"])
    resolved = {
        "format_version": CONFIG_FORMAT_VERSION,
        "seed": merged["seed"],
        "out_dir": str(merged["out_dir"]),
        "task": {"family": task.family, "params": task.params, "task_id": task.task_id},
        "n_bins": merged.get("n_bins", 32),
        "train": {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in asdict(train).items() if k != "seed"},
    }
    return resolved


def resolve_estimate_config(doc: dict, overrides: dict) -> dict:
    merged = _common(
        doc, overrides, {"task"}, {"model", "oracle", "estimator", "n_bins"}, "estimate config"
    )
    task = parse_task(merged["task"])
    estimator = parse_estimator(merged.get("estimator", {}))
    if overrides.get("mode") is not None:
        estimator["mode"] = overrides["mode"]
    model = merged.get("model")
    oracle = bool(merged.get("oracle", False))
    if oracle == (model is not None):
        raise ConfigError(
            "estimate config needs exactly one velocity source: "
            "either 'model' (a model file path) or 'oracle': true"
        )
    if oracle and task.analytic is None:
        raise ConfigError(
            "'oracle': true requires a gaussian-mixture-label task with an analytic oracle"
        )
    return {
        "format_version": CONFIG_FORMAT_VERSION,
        "seed": merged["seed"],
        "out_dir": str(merged["out_dir"]),
        "task": {"family": task.family, "params": task.params, "task_id": task.task_id},
        "n_bins": merged.get("n_bins", 32),
        "model": None if model is None else str(model),
        "oracle": oracle,
        "estimator": estimator,
    }


def resolve_benchmark_config(doc: dict, overrides: dict) -> dict:
    merged = _common(
        doc, overrides, set(), {"tasks", "estimators", "bench", "workers"}, "benchmark config"
    )
    workers = merged.get("workers", 1)
    if overrides.get("workers") is not None:
        workers = overrides["workers"]
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError("'workers' must be a positive integer")
    tasks_doc = merged.get("tasks", "default")
    if tasks_doc == "default":
        tasks = default_suite()
        tasks_resolved = "default"
    elif isinstance(tasks_doc, list) and tasks_doc:
        tasks = [parse_task(t, f"tasks[{i}]") for i, t in enumerate(tasks_doc)]
        tasks_resolved = [
            {"family": t.family, "params": t.params, "task_id": t.task_id} for t in tasks
        ]
    else:
        raise ConfigError("'tasks' must be \"default\" or a non-empty list of task specs")
    estimators = merged.get("estimators", ["rfmi-data-coupled", "rfmi-trajectory", "infonce"])
    if not isinstance(estimators, list) or not estimators:
        raise ConfigError("'estimators' must be a non-empty list")
    bench = parse_bench(merged.get("bench", {}), merged["seed"], workers)
    bench_doc = {
        k: v for k, v in asdict(bench).items() if k not in ("master_seed", "workers", "infonce")
    }
    bench_doc["infonce"] = {
        k: (list(v) if isinstance(v, tuple) else v)
        for k, v in asdict(bench.infonce).items()
        if k != "seed"
    }
    return {
        "format_version": CONFIG_FORMAT_VERSION,
        "seed": merged["seed"],
        "out_dir": str(merged["out_dir"]),
        "tasks": tasks_resolved,
        "estimators": list(estimators),
        "bench": bench_doc,
        "workers": workers,
    }


_FT_KEYS = {
    "pool_size", "keep", "passes", "iterations", "lr", "steps", "w", "t_eps",
    "n_metric", "batch_size",
}

_FT_DEFAULTS = {
    "pool_size": 50,
    "keep": 1,
    "passes": 2,
    "iterations": 1000,
    "lr": None,
    "steps": 100,
    "w": 4.5,
    "t_eps": 0.99,
    "n_metric": 2000,
    "batch_size": 64,
}


def resolve_finetune_config(doc: dict, overrides: dict) -> dict:
    merged = _common(doc, overrides, {"model", "task"}, {"finetune"}, "finetune config")
    task = parse_task(merged["task"])
    if task.analytic is None:
        raise ConfigError(
            "finetune requires a gaussian-mixture-label task (closed-form posterior)"
        )
    ft_doc = merged.get("finetune", {})
    _reject_unknown(ft_doc, _FT_KEYS, "finetune section")
    ft = dict(_FT_DEFAULTS)
    ft.update(ft_doc)
    if ft["keep"] > ft["pool_size"]:
        raise ConfigError(
            f"finetune keep (k={ft['keep']}) must not exceed pool_size (M={ft['pool_size']})"
        )
    return {
        "format_version": CONFIG_FORMAT_VERSION,
        "seed": merged["seed"],
        "out_dir": str(merged["out_dir"]),
        "model": str(merged["model"]),
        "task": {"family": task.family, "params": task.params, "task_id": task.task_id},
        "finetune": ft,
    }


def resolve_report_config(doc: dict, overrides: dict) -> dict:
    merged = _common(doc, overrides, {"in_path"}, set(), "report config")
    return {
        "format_version": CONFIG_FORMAT_VERSION,
        "seed": merged["seed"],
        "out_dir": str(merged["out_dir"]),
        "in_path": str(merged["in_path"]),
    }


def write_snapshot(resolved: dict, out_dir: Path) -> None:
    (out_dir / "resolved_config.json").write_text(json.dumps(resolved, indent=1))
