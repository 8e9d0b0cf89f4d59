"""Exception hierarchy shared by every flowcast module."""


class FlowcastError(Exception):
    """Base class for all library errors."""


class DimensionError(FlowcastError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(FlowcastError, ValueError):
    """A configuration value is invalid or inconsistent."""


class UsageError(FlowcastError, RuntimeError):
    """An API was called in the wrong state."""


class NumericError(FlowcastError, ArithmeticError):
    """A computation produced a non-finite value."""


class DataError(FlowcastError, ValueError):
    """Input data violates a content rule (duplicates, empty result, ...)."""


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ImputationError(DataError):
    """No donor values exist for a missing cell."""


class NormalizationError(DataError):
    """Normalization cannot be fitted (constant series)."""


class TrainingError(FlowcastError, RuntimeError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)


class CheckpointError(FlowcastError, ValueError):
    """Checkpoint file is truncated, corrupted or of an unknown version."""
