"""Multi-modal brain lesion segmentation: model, losses, training, tuning and evaluation."""
from .core_types import (ConfigError, DataError, ExperimentConfig, Mask, ModelConfig,
                         NumericError, TaskProfile, Volume, task_profile)
from .model import SegmentationNet, build_model

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "ExperimentConfig", "Mask", "ModelConfig", "NumericError",
    "SegmentationNet", "TaskProfile", "Volume", "build_model", "task_profile",
]
