"""Configuration and checkpoints for the two-stage runner behind the command line."""
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import PRESETS, ConfigError, ExperimentConfig
from .runner import (DOMAINS, generate_data, run_eval, run_experiment, run_matrix, run_stage1, run_stage2)

__all__ = [
    "Checkpoint", "CheckpointError", "load_checkpoint", "save_checkpoint", "PRESETS", "ConfigError",
    "ExperimentConfig", "DOMAINS", "generate_data", "run_eval", "run_experiment", "run_matrix", "run_stage1",
    "run_stage2",
]
