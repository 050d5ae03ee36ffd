"""Experiment orchestration: configs, desk datasets, training, checkpoints and the CLI."""

from .checkpoint import Checkpoint
from .config import ExperimentConfig, Method, config_from_dict, load_config
from .data import make_dataset
from .training import MetricsRecord, StudentSystem, distill, evaluate, restore_system, train_teacher

__all__ = ["Checkpoint", "ExperimentConfig", "Method", "config_from_dict", "load_config", "make_dataset",
           "MetricsRecord", "StudentSystem", "distill", "evaluate", "restore_system", "train_teacher"]
