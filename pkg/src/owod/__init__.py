"""Desk-scale open-world object detection with probabilistic objectness."""

__version__ = "0.1.0"

from .data import DatasetSpec, generate_dataset, load_dataset, save_dataset, task_view
from .metrics import EvalReport
from .model import TrainConfig
from .objectness import GaussianState, ObjectnessConfig
from .protocol import BenchmarkConfig, run_benchmark, run_task, temperature_sweep

__all__ = [
    "BenchmarkConfig",
    "DatasetSpec",
    "EvalReport",
    "GaussianState",
    "ObjectnessConfig",
    "TrainConfig",
    "generate_dataset",
    "load_dataset",
    "run_benchmark",
    "run_task",
    "save_dataset",
    "task_view",
    "temperature_sweep",
]
