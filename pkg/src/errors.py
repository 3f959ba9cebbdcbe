"""
Exception hierarchy for HeadGAN Lab.

Every failure raised by the package derives from LabError so the CLI can map
it to an exit code. Shape violations also subclass ValueError so numeric
callers can catch them the usual way.
"""


class LabError(Exception):
    """Base exception for all HeadGAN Lab errors."""
    exit_code = 1


class ConfigError(LabError):
    """Raised when a config file or value is invalid."""
    exit_code = 3

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(LabError):
    """Raised when input data (datasets, sequences, logs) is unusable."""
    exit_code = 4


class ContainerError(DataError):
    """Raised when an array container file is malformed."""
    pass


class ModelMismatchError(DataError):
    """Raised when inputs were built from different morphable models."""
    pass


class NothingToPlotError(DataError):
    """Raised when a preview has no input to draw."""
    pass


class ShapeError(LabError, ValueError):
    """Raised when array dimensions don't match what an operation needs."""
    exit_code = 4


class RuntimeFailure(LabError):
    """Raised when a run cannot continue."""
    exit_code = 5


class CheckpointMismatchError(RuntimeFailure):
    """Raised when a checkpoint doesn't match the requested architecture."""
    pass


class NonFiniteLossError(RuntimeFailure):
    """Raised when a training step produces NaN or Inf losses."""

    def __init__(self, step: int, record: dict[str, float]):
        self.step = step
        self.record = record
        bad = ", ".join(k for k, v in record.items() if v != v or v in (float("inf"), float("-inf")))
        super().__init__(f"Non-finite loss at step {step}: {bad or 'unknown term'}")
