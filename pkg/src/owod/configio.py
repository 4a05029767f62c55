"""Run configuration files, checkpoints, and atomic output writing.

All persisted artifacts are JSON with shortest-exact decimal floats, so
save -> load -> save is byte-identical. Config files reject unknown keys
and default every field, making the empty object runnable.
"""

from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetSpec
from .model import DetectorParams, TrainConfig
from .objectness import GaussianState
from .protocol import AblationFlags, BenchmarkConfig, ExemplarEntry, ExemplarSet, TaskState

CONFIG_VERSION = 1
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unparseable run configuration."""


def atomic_write(path: str, text: str) -> None:
    """Write via a temp file and rename, so readers never see torn output."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class RunConfig:
    """The single human-readable configuration document."""

    config_version: int = CONFIG_VERSION
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)

    def __post_init__(self) -> None:
        # The benchmark block carries the authoritative dataset/train
        # sub-configs so a single object drives every subcommand.
        object.__setattr__(
            self,
            "benchmark",
            dataclasses.replace(self.benchmark, dataset=self.dataset, train=self.train),
        )


def _build_dataclass(cls, data: dict, path: str):
    """Flat dataclass from a JSON object; unknown keys are rejected."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


_TOP_LEVEL = {
    "config_version": None,
    "dataset": DatasetSpec,
    "train": TrainConfig,
    "benchmark": BenchmarkConfig,
}


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(data) - set(_TOP_LEVEL)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {sorted(unknown)}")
    version = data.get("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config_version {version!r}, expected {CONFIG_VERSION}")
    dataset = _build_dataclass(DatasetSpec, data.get("dataset", {}), "dataset")
    train = _build_dataclass(TrainConfig, data.get("train", {}), "train")
    if not isinstance(data.get("benchmark", {}), dict):
        raise ConfigError("benchmark: expected an object")
    bench_data = dict(data.get("benchmark", {}))
    if "dataset" in bench_data or "train" in bench_data:
        raise ConfigError("benchmark: dataset and train are configured at the top level")
    flags = _build_dataclass(AblationFlags, bench_data.pop("flags", {}), "benchmark.flags")
    benchmark = _build_dataclass(BenchmarkConfig, bench_data, "benchmark")
    benchmark = dataclasses.replace(benchmark, dataset=dataset, train=train, flags=flags)
    return RunConfig(config_version=version, dataset=dataset, train=train, benchmark=benchmark)


def run_config_to_dict(cfg: RunConfig) -> dict:
    bench = dataclasses.asdict(cfg.benchmark)
    bench.pop("dataset")
    bench.pop("train")
    return {
        "config_version": cfg.config_version,
        "dataset": dataclasses.asdict(cfg.dataset),
        "train": dataclasses.asdict(cfg.train),
        "benchmark": bench,
    }


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    return run_config_from_dict(data)


def _array_to_nested(a: np.ndarray) -> list:
    return a.tolist()


def checkpoint_to_dict(state: TaskState, cfg: RunConfig, seed: int) -> dict:
    p = state.params
    return {
        "schema_version": CHECKPOINT_VERSION,
        "config_version": cfg.config_version,
        "seed": seed,
        "task": state.task,
        "step_count": state.step_count,
        "params": {
            "w1": _array_to_nested(p.w1),
            "b1": _array_to_nested(p.b1),
            "w2": _array_to_nested(p.w2),
            "b2": _array_to_nested(p.b2),
            "w_cls": _array_to_nested(p.w_cls),
            "b_cls": _array_to_nested(p.b_cls),
            "w_box": _array_to_nested(p.w_box),
            "b_box": _array_to_nested(p.b_box),
        },
        "gaussian": {
            "mu": _array_to_nested(state.gaussian.mu),
            "sigma": _array_to_nested(state.gaussian.sigma),
            "momentum": state.gaussian.momentum,
        },
        "exemplars": {
            "budget": state.exemplars.budget,
            "skipped_classes": list(state.exemplars.skipped_classes),
            "entries": [
                {
                    "scene_id": e.scene_id,
                    "annotation_index": e.annotation_index,
                    "class": e.class_id,
                    "score": e.score,
                }
                for e in state.exemplars.entries
            ],
        },
        "config": run_config_to_dict(cfg),
    }


def checkpoint_from_dict(data: dict) -> tuple[TaskState, dict, int]:
    """Rebuild (state, config echo, seed); checks the schema version."""
    version = data.get("schema_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint schema_version {version!r}, expected {CHECKPOINT_VERSION}"
        )
    p = data["params"]
    params = DetectorParams(
        w1=np.array(p["w1"], dtype=np.float64),
        b1=np.array(p["b1"], dtype=np.float64),
        w2=np.array(p["w2"], dtype=np.float64),
        b2=np.array(p["b2"], dtype=np.float64),
        w_cls=np.array(p["w_cls"], dtype=np.float64),
        b_cls=np.array(p["b_cls"], dtype=np.float64),
        w_box=np.array(p["w_box"], dtype=np.float64),
        b_box=np.array(p["b_box"], dtype=np.float64),
    )
    g = data["gaussian"]
    gaussian = GaussianState(
        mu=np.array(g["mu"], dtype=np.float64),
        sigma=np.array(g["sigma"], dtype=np.float64),
        momentum=g["momentum"],
    )
    e = data["exemplars"]
    exemplars = ExemplarSet(
        entries=tuple(
            ExemplarEntry(
                scene_id=x["scene_id"],
                annotation_index=x["annotation_index"],
                class_id=x["class"],
                score=x["score"],
            )
            for x in e["entries"]
        ),
        budget=e["budget"],
        skipped_classes=tuple(e["skipped_classes"]),
    )
    state = TaskState(
        params=params,
        gaussian=gaussian,
        exemplars=exemplars,
        task=data["task"],
        step_count=data["step_count"],
    )
    return state, data["config"], data["seed"]


def save_checkpoint(path: str, state: TaskState, cfg: RunConfig, seed: int) -> None:
    atomic_write(path, json.dumps(checkpoint_to_dict(state, cfg, seed), indent=2) + "\n")


def load_checkpoint(path: str) -> tuple[TaskState, dict, int]:
    with open(path, "r", encoding="utf-8") as fh:
        return checkpoint_from_dict(json.load(fh))
