"""Differentiable adversarial augmentation-policy search for view-based self-supervised learning."""

from . import tensor
from .augment import AugOp, build_operation_set
from .config import ConfigError, ConfigParseError, RunConfig, load_config
from .policy import PolicyParams, generate_views
from .train import Trainer, TrainingAborted, stage_size, train

__version__ = "0.1.0"

__all__ = [
    "AugOp", "ConfigError", "ConfigParseError", "PolicyParams", "RunConfig", "Trainer",
    "TrainingAborted", "build_operation_set", "generate_views", "load_config", "stage_size",
    "tensor", "train",
]
