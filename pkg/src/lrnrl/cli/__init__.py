"""Configuration, checkpoints, metrics and the ``lrnrl`` command."""

from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigFileError, ExperimentConfig, RunConfig, parse_config, parse_text, serialize
from .main import main

__all__ = ["Checkpoint", "CheckpointError", "ConfigFileError", "ExperimentConfig", "RunConfig", "main",
           "parse_config", "parse_text", "serialize"]
