"""Prototype networks with occurrence maps for multi-label image classification."""

from .config import LossConfig, ModelConfig, RunConfig, TrainConfig, desk_scale, load_config
from .estimator import XProtoNetClassifier
from .exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    ProjectionError,
    PruningError,
    XProtoNetError,
)
from .model import PrototypeNet, build_model

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "LossConfig",
    "ModelConfig",
    "PrototypeNet",
    "ProjectionError",
    "PruningError",
    "RunConfig",
    "TrainConfig",
    "XProtoNetClassifier",
    "XProtoNetError",
    "build_model",
    "desk_scale",
    "load_config",
]

__version__ = "0.1.0"
