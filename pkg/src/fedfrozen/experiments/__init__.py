"""Experiment harness: configs, the sweep runner, aggregation, SVG charts and figure commands."""

from .config import DataSettings, ExperimentConfig, MethodSettings, load_config
from .runner import ExperimentOutput, RunSummary, run_experiment

__all__ = [
    "DataSettings",
    "ExperimentConfig",
    "MethodSettings",
    "load_config",
    "ExperimentOutput",
    "RunSummary",
    "run_experiment",
]
