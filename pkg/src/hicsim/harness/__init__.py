"""Experiment orchestration: config, datasets, studies, endurance report, CLI."""
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .datasets import DatasetError, Split, load_dataset
from .endurance import EnduranceReport, EventLogError, endurance_report
from .experiments import (
    ablation_combinations,
    run_ablation,
    run_drift_sweep,
    run_training,
    run_width_sweep,
)
