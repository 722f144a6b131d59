"""DNN fingerprint ownership verification and the fingerprint-removal attack at desk scale."""

from .errors import (AttackError, CheckpointError, ConfigurationError, MetricInapplicableError, RemovalError,
                     SchemaError, TrainingError)
from .nnkit import DatasetBundle, LabeledSet, LayeredModel, TrainConfig, build_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AttackError", "CheckpointError", "ConfigurationError", "MetricInapplicableError", "RemovalError",
    "SchemaError", "TrainingError", "DatasetBundle", "LabeledSet", "LayeredModel", "TrainConfig",
    "build_model", "load_checkpoint", "save_checkpoint",
]
