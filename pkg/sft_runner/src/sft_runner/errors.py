"""Runner error types."""


class RunnerError(Exception):
    """Base class for training-runner failures."""


class DatasetError(RunnerError):
    """Raised when the dataset or manifest cannot be read or is inconsistent."""


class CollationError(RunnerError):
    """Raised when a record cannot be rendered into model inputs."""


class TrainingDivergedError(RunnerError):
    """Raised when the training loss becomes non-finite."""
