"""Experiment runner: config parsing, ensembles, report files and the command line."""
from .config import (
    ConfigError,
    ExperimentConfig,
    emit_config,
    load_config,
    parse_config_text,
    validate,
)
from .report import emit_report
from .runner import ExperimentError, ExperimentReport, run_experiment

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentError",
    "ExperimentReport",
    "emit_config",
    "emit_report",
    "load_config",
    "parse_config_text",
    "run_experiment",
    "validate",
]
