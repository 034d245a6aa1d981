"""Desk-scale toolkit for deep-and-thin sub-billion decoder language models."""

from .architecture import (
    PRESETS,
    ConfigError,
    ModelConfig,
    SharingStrategy,
    count_params,
    enumerate_depth_width,
    validate,
)
from .layer_sharing import execution_schedule
from .model import Model
from .numerics import DiffTensor

__all__ = [
    "PRESETS",
    "ConfigError",
    "DiffTensor",
    "Model",
    "ModelConfig",
    "SharingStrategy",
    "count_params",
    "enumerate_depth_width",
    "execution_schedule",
    "validate",
]

__version__ = "0.1.0"
