"""Command line interface.

Subcommands: train, estimate, benchmark, finetune, report. Each takes a
strict JSON config (--config); --seed / --out / --mode / --workers override
the corresponding fields. Every run writes a resolved config snapshot next
to its outputs. Exit codes: 0 success, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .bench import BenchReport, FlowTaskView, run_benchmark
from .errors import ConfigError, NumericalError
from .finetune import FineTuneConfig, alignment_metric, build_finetune_set, finetune
from .flow import load_model, save_model, train_flow
from .mi import mi_estimate
from .seeding import substream

WORKERS_ENV = "FLOWMI_WORKERS"


def _prepare(resolved: dict) -> Path:
    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_snapshot(resolved, out_dir)
    return out_dir


def cmd_train(args) -> int:
    resolved = cfgmod.resolve_train_config(cfgmod.load_json(args.config), vars(args))
    out_dir = _prepare(resolved)
    task = cfgmod.parse_task(resolved["task"])
    view = FlowTaskView(task, resolved["n_bins"])
    train_cfg = cfgmod.parse_train(resolved["train"], seed=resolved["seed"])
    model, _ = train_flow(view, train_cfg, log_path=out_dir / "train_log.csv")
    save_model(model, out_dir / "model.json", rng_seed=resolved["seed"])
    print(f"wrote {out_dir / 'model.json'}")
    return 0


def _check_model_matches_view(model, view) -> None:
    values = getattr(model.codec, "values", None)
    if values is not None:
        expected = getattr(view, "condition_values", None)
        if expected is None or tuple(values) != tuple(expected):
            raise ConfigError(
                "model condition set does not match the task view "
                f"(model has {len(values)} values; check n_bins and task family)"
            )
    if model.data_dim != view.data_dim:
        raise ConfigError(
            f"model data_dim {model.data_dim} does not match task dim {view.data_dim}"
        )


def cmd_estimate(args) -> int:
    resolved = cfgmod.resolve_estimate_config(cfgmod.load_json(args.config), vars(args))
    out_dir = _prepare(resolved)
    task = cfgmod.parse_task(resolved["task"])
    view = FlowTaskView(task, resolved["n_bins"])
    if resolved["oracle"]:
        source = task.analytic
        data = task.analytic
    else:
        source = load_model(resolved["model"])
        _check_model_matches_view(source, view)
        data = view
    est = mi_estimate(source, data, seed=resolved["seed"], **resolved["estimator"])
    record = est.to_dict()
    record["task_id"] = task.task_id
    record["true_mi"] = task.true_mi
    (out_dir / "estimate.json").write_text(json.dumps(record, indent=1))
    header = ",".join(est.CSV_COLUMNS)
    (out_dir / "estimate.csv").write_text(header + "\n" + est.csv_row() + "\n")
    print(f"{est.estimator_tag}: {est.value:.6f} +- {est.stderr:.6f} nats")
    return 0


def cmd_benchmark(args) -> int:
    resolved = cfgmod.resolve_benchmark_config(cfgmod.load_json(args.config), vars(args))
    out_dir = _prepare(resolved)
    if resolved["tasks"] == "default":
        from .bench import default_suite

        tasks = default_suite()
    else:
        tasks = [cfgmod.parse_task(t) for t in resolved["tasks"]]
    bench_cfg = cfgmod.parse_bench(
        {k: v for k, v in resolved["bench"].items()},
        resolved["seed"],
        resolved["workers"],
    )
    report = run_benchmark(tasks, resolved["estimators"], bench_cfg)
    report.write_csv(out_dir / "report.csv")
    report.write_json(out_dir / "report.json")
    report.write_heatmap_csv(out_dir / "heatmap.csv")
    for row in report.rows:
        print(
            f"{row.task_id:18s} {row.estimator_tag:18s} "
            f"est {row.estimate:+.4f}  true {row.true_mi:.4f}  bias {row.bias:+.4f} [{row.status}]"
        )
    return 0


def cmd_finetune(args) -> int:
    resolved = cfgmod.resolve_finetune_config(cfgmod.load_json(args.config), vars(args))
    out_dir = _prepare(resolved)
    task = cfgmod.parse_task(resolved["task"]).analytic
    model = load_model(resolved["model"])
    ft = resolved["finetune"]
    seed = resolved["seed"]

    rng_before = substream(seed, "finetune", "metric-before")
    before = alignment_metric(model, task, ft["n_metric"], rng_before,
                              steps=ft["steps"], w=ft["w"])

    from .finetune import FineTuneSet

    sets = []
    for p in range(ft["passes"]):
        sets.append(
            build_finetune_set(
                model,
                task.condition_values,
                ft["pool_size"],
                ft["keep"],
                steps=ft["steps"],
                w=ft["w"],
                t_eps=ft["t_eps"],
                seed=int(substream(seed, "finetune", "pass", p).integers(2**31)),
            )
        )
    merged = FineTuneSet(
        entries=tuple(e for s in sets for e in s.entries),
        pool_size=ft["pool_size"],
        keep=ft["keep"],
        seed=seed,
    )
    merged.write_json(out_dir / "finetune_set.json")

    lr = 1e-4 if ft["lr"] is None else ft["lr"]
    ft_cfg = FineTuneConfig(
        iterations=ft["iterations"],
        batch_size=ft["batch_size"],
        lr=lr,
        seed=int(substream(seed, "finetune", "ft").integers(2**31)),
    )
    model_after, _ = finetune(model, merged, ft_cfg)
    save_model(model_after, out_dir / "model_ft.json", rng_seed=seed)

    rng_after = substream(seed, "finetune", "metric-after")
    after = alignment_metric(model_after, task, ft["n_metric"], rng_after,
                             steps=ft["steps"], w=ft["w"])
    summary = {
        "alignment_before": before,
        "alignment_after": after,
        "abs_difference": after - before,
        "relative_gain_pct": 100.0 * (after - before) / before,
    }
    (out_dir / "alignment.json").write_text(json.dumps(summary, indent=1))
    lines = ["alignment_before,alignment_after,abs_difference,relative_gain_pct",
             f"{before!r},{after!r},{after - before!r},{100.0 * (after - before) / before!r}"]
    (out_dir / "alignment.csv").write_text("\n".join(lines) + "\n")
    print(
        f"alignment before {before:.4f}, after {after:.4f}, "
        f"abs diff {after - before:+.4f}, relative gain {100.0 * (after - before) / before:+.2f}%"
    )
    return 0


def cmd_report(args) -> int:
    resolved = cfgmod.resolve_report_config(cfgmod.load_json(args.config), vars(args))
    out_dir = _prepare(resolved)
    in_path = Path(resolved["in_path"])
    if not in_path.exists():
        raise ConfigError(f"report input not found: {in_path}")
    report = BenchReport.from_json_dict(json.loads(in_path.read_text()))
    report.write_csv(out_dir / "report.csv")
    report.write_heatmap_csv(out_dir / "heatmap.csv")
    for row in report.rows:
        print(f"{row.task_id:18s} {row.estimator_tag:18s} bias {row.bias:+.4f} [{row.status}]")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowmi",
        description="MI estimation with conditional rectified flows",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "train": (cmd_train, "train a conditional flow on a synthetic task"),
        "estimate": (cmd_estimate, "estimate MI with a trained model or the analytic oracle"),
        "benchmark": (cmd_benchmark, "run the known-MI benchmark grid"),
        "finetune": (cmd_finetune, "MI-guided self-supervised fine-tuning"),
        "report": (cmd_report, "re-emit CSV report and bias heatmap from a report JSON"),
    }
    for name, (fn, help_text) in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if name == "estimate":
            p.add_argument(
                "--mode",
                choices=("data-coupled", "trajectory"),
                default=None,
                help="override the estimator mode",
            )
        if name == "benchmark":
            p.add_argument(
                "--workers", type=int, default=None,
                help=f"worker processes (also via ${WORKERS_ENV})",
            )
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "workers", None) is None and args.command == "benchmark":
        env = os.environ.get(WORKERS_ENV)
        if env is not None:
            try:
                args.workers = int(env)
            except ValueError:
                print(f"config error: ${WORKERS_ENV} must be an integer", file=sys.stderr)
                return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
