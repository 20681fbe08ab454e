"""Experiment orchestration: configs, pipeline steps, run artifacts and the CLI."""

from .config import ConfigError, ExperimentConfig, config_from_dict, config_hash, load_config
from .runs import AggregateReport, Layout, RunManifest, aggregate_reports, aggregate_runs, load_checkpoint, save_checkpoint

__all__ = [
    "AggregateReport", "ConfigError", "ExperimentConfig", "Layout", "RunManifest", "aggregate_reports", "aggregate_runs",
    "config_from_dict", "config_hash", "load_checkpoint", "load_config", "save_checkpoint",
]
