"""Command-line entry point.

Subcommands: generate, train, eval, benchmark, sweep, gradcheck, report.
Exit codes: 0 success, 1 runtime or data errors, 2 usage or config
errors. Every artifact is written atomically under --out with a
deterministic filename.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import model, plots, protocol
from .configio import (
    ConfigError,
    RunConfig,
    atomic_write,
    load_checkpoint,
    load_run_config,
    run_config_from_dict,
    save_checkpoint,
)
from .data import Dataset, generate_dataset, load_dataset, save_dataset, task_view
from .metrics import EvalReport
from .objectness import GaussianState
from .protocol import SUMMARY_COLUMNS, BenchmarkConfig, TaskState, run_task

GRADCHECK_TOLERANCE = 1e-4


def _fmt_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def summary_csv(rows) -> str:
    lines = [",".join(SUMMARY_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt_cell(row[c]) for c in SUMMARY_COLUMNS))
    return "\n".join(lines) + "\n"


def aggregate_csv(rows) -> str:
    metrics = ("map_prev", "map_current", "map_both", "u_recall", "a_ose", "wi")
    columns = ["task"]
    for name in metrics:
        columns += [f"{name}_mean", f"{name}_std"]
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt_cell(row[c]) for c in columns))
    return "\n".join(lines) + "\n"


def _report_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"


def _write_report(out: str, report: EvalReport, suffix: str = "") -> str:
    path = os.path.join(out, f"report{suffix}_task{report.task}.json")
    atomic_write(path, _report_json(report))
    return path


def _effective_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else run_config_from_dict({})
    if args.seed is not None:
        cfg = RunConfig(
            config_version=cfg.config_version,
            dataset=dataclasses.replace(cfg.dataset, seed=args.seed),
            train=dataclasses.replace(cfg.train, seed=args.seed),
            benchmark=dataclasses.replace(cfg.benchmark, seeds=(args.seed,)),
        )
    return cfg


def _get_dataset(cfg: RunConfig, args, seed: "int | None" = None) -> Dataset:
    if getattr(args, "dataset", None):
        return load_dataset(args.dataset, cfg.dataset)
    spec = cfg.dataset if seed is None else dataclasses.replace(cfg.dataset, seed=seed)
    return generate_dataset(spec)


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _cmd_generate(args) -> int:
    cfg = _effective_config(args)
    dataset = generate_dataset(cfg.dataset)
    path = os.path.join(args.out, "dataset.jsonl")
    save_dataset(dataset, path)
    _say(args, f"wrote {len(dataset.scenes)} scenes to {path}")
    return 0


def _cmd_train(args) -> int:
    cfg = _effective_config(args)
    seed = cfg.benchmark.seeds[0]
    dataset = _get_dataset(cfg, args, seed=seed)
    state = None
    if args.resume:
        state, _, _ = load_checkpoint(args.resume)
    new_state, _, report = run_task(state, dataset, args.task, cfg.benchmark, seed=seed)
    ckpt_path = os.path.join(args.out, f"checkpoint_task{args.task}.json")
    save_checkpoint(ckpt_path, new_state, cfg, seed)
    report_path = _write_report(args.out, report)
    _say(args, f"wrote {ckpt_path} and {report_path}")
    return 0


def _load_states(path: str, cfg: RunConfig) -> tuple[TaskState, int]:
    state, config_echo, seed = load_checkpoint(path)
    if config_echo.get("config_version") != cfg.config_version:
        raise ValueError(
            f"checkpoint config_version {config_echo.get('config_version')!r} does not match "
            f"the active config_version {cfg.config_version}"
        )
    return state, seed


def _cmd_eval(args) -> int:
    cfg = _effective_config(args)
    state, seed = _load_states(args.checkpoint, cfg)
    dataset = _get_dataset(cfg, args, seed=seed)
    task = state.task if args.task is None else args.task
    view = task_view(dataset, task, "test")
    report = protocol.evaluate(
        state.params, state.gaussian, view, cfg.benchmark, tau=args.tau, seed=seed
    )
    report_path = _write_report(args.out, report)
    _say(args, f"wrote {report_path}")
    return 0


def _cmd_benchmark(args) -> int:
    cfg = _effective_config(args)
    bench = cfg.benchmark
    dataset = load_dataset(args.dataset, cfg.dataset) if args.dataset else None
    result = protocol.run_benchmark(bench, dataset=dataset)
    multi = len(bench.seeds) > 1
    for report in result.reports:
        suffix = f"_seed{report.seed}" if multi else ""
        _write_report(args.out, report, suffix=suffix)
    for state, seed in zip(result.states, bench.seeds):
        suffix = f"_seed{seed}" if multi else ""
        save_checkpoint(
            os.path.join(args.out, f"checkpoint{suffix}_task{state.task}.json"), state, cfg, seed
        )
    atomic_write(os.path.join(args.out, "summary.csv"), summary_csv(result.summary_rows))
    if result.aggregate_rows:
        atomic_write(os.path.join(args.out, "summary_stats.csv"), aggregate_csv(result.aggregate_rows))
    for report in result.reports:
        suffix = f"_seed{report.seed}" if multi else ""
        svg = plots.pr_curves_svg(report)
        atomic_write(os.path.join(args.out, f"pr{suffix}_task{report.task}.svg"), svg)
    _say(args, f"wrote {len(result.reports)} reports and summary.csv to {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _effective_config(args)
    state, seed = _load_states(args.checkpoint, cfg)
    dataset = _get_dataset(cfg, args, seed=seed)
    task = state.task if args.task is None else args.task
    taus = tuple(float(t) for t in args.taus.split(",")) if args.taus else cfg.benchmark.tau_list
    view = task_view(dataset, task, "test")
    reports = protocol.temperature_sweep(
        state.params, state.gaussian, view, taus, cfg.benchmark, seed=seed
    )
    rows = [protocol._summary_row(r) for r in reports]
    atomic_write(os.path.join(args.out, "sweep.csv"), summary_csv(rows))
    atomic_write(
        os.path.join(args.out, "sweep.json"),
        json.dumps([r.to_dict() for r in reports], indent=2) + "\n",
    )
    atomic_write(os.path.join(args.out, "sweep.svg"), plots.sweep_svg(reports))
    _say(args, f"swept {len(taus)} temperatures; wrote sweep.csv, sweep.json, sweep.svg")
    return 0


def _cmd_gradcheck(args) -> int:
    worst = 0.0
    base_seed = args.seed if args.seed is not None else 0
    for trial in range(args.trials):
        rng = np.random.default_rng([base_seed, trial])
        err = _gradcheck_trial(rng)
        worst = max(worst, err)
        _say(args, f"trial {trial}: max relative error {err:.3e}")
    _say(args, f"worst over {args.trials} trials: {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if worst < GRADCHECK_TOLERANCE else 1


def _gradcheck_trial(rng: np.random.Generator) -> float:
    from .data import Annotation, LabeledScene, Scene

    feature_dim, n_query, n_classes = 6, 5, 3
    params = model.init_params(rng, feature_dim=feature_dim, hidden_dim=6, embed_dim=5, num_classes=n_classes)
    gaussian = GaussianState(
        mu=rng.normal(size=5), sigma=rng.uniform(0.5, 2.0, size=5), momentum=0.1
    )
    batch = []
    for s in range(2):
        features = rng.normal(size=(n_query, feature_dim))
        boxes = np.column_stack(
            [rng.uniform(0.2, 0.8, size=(n_query, 2)), rng.uniform(0.1, 0.4, size=(n_query, 2))]
        )
        scene = Scene(
            scene_id=f"g{s}",
            task=0,
            split="train",
            features=features,
            proposal_boxes=boxes,
            annotations=(),
        )
        targets = tuple(
            Annotation(
                class_id=int(rng.integers(0, n_classes)),
                box=np.concatenate([rng.uniform(0.2, 0.8, 2), rng.uniform(0.1, 0.4, 2)]),
            )
            for _ in range(int(rng.integers(1, 3)))
        )
        batch.append(LabeledScene(scene=scene, targets=targets, target_indices=tuple(range(len(targets)))))
    return model.gradient_check(params, gaussian, batch, alpha=0.1)


def _cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        with open(path, "r", encoding="utf-8") as fh:
            reports.append(EvalReport.from_dict(json.load(fh)))
    rows = [protocol._summary_row(r) for r in reports]
    atomic_write(os.path.join(args.out, "summary.csv"), summary_csv(rows))
    for report in reports:
        svg = plots.pr_curves_svg(report)
        atomic_write(os.path.join(args.out, f"pr_task{report.task}.svg"), svg)
    taus = {r.tau for r in reports}
    if len(taus) > 1:
        atomic_write(os.path.join(args.out, "sweep.svg"), plots.sweep_svg(reports))
    _say(args, f"rendered {len(reports)} report(s) into {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="owod",
        description="Desk-scale open-world object detection benchmark runner",
    )
    parser.add_argument("--config", help="path to a run-config JSON file")
    parser.add_argument("--seed", type=int, help="override every configured seed")
    parser.add_argument("--out", default=".", help="output directory (default: current)")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", help="write the synthetic dataset")

    p_train = sub.add_parser("train", help="train one task")
    p_train.add_argument("--task", type=int, required=True)
    p_train.add_argument("--dataset", help="dataset file (default: regenerate from config)")
    p_train.add_argument("--resume", help="checkpoint of the previous task")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a test view")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset")
    p_eval.add_argument("--task", type=int)
    p_eval.add_argument("--tau", type=float)

    p_bench = sub.add_parser("benchmark", help="run the full task schedule")
    p_bench.add_argument("--dataset")

    p_sweep = sub.add_parser("sweep", help="temperature sweep of a checkpoint")
    p_sweep.add_argument("--checkpoint", required=True)
    p_sweep.add_argument("--dataset")
    p_sweep.add_argument("--task", type=int)
    p_sweep.add_argument("--taus", help="comma-separated temperatures")

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p_grad.add_argument("--trials", type=int, default=5)

    p_rep = sub.add_parser("report", help="render CSV and figures from report JSONs")
    p_rep.add_argument("reports", nargs="+")

    return parser


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "benchmark": _cmd_benchmark,
    "sweep": _cmd_sweep,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}


def main(argv: "list[str] | None" = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        os.makedirs(args.out, exist_ok=True)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
