"""Exception types shared across fpkit."""


class ConfigurationError(ValueError):
    """Bad architecture name, hyperparameter, or plan field."""


class SchemaError(ValueError):
    """A persisted artifact does not match the registered architecture."""


class CheckpointError(OSError):
    """A checkpoint or fingerprint directory is missing or corrupt."""


class MetricInapplicableError(ValueError):
    """A white-box metric was asked to compare different architectures."""


class TrainingError(RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class AttackError(RuntimeError):
    pass


class RemovalError(TrainingError):
    pass
