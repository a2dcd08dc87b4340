"""Exception hierarchy shared across the package."""


class CondretError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(CondretError):
    """A configuration value violates its documented constraints."""


class DataFormatError(CondretError):
    """A serialized artifact could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ReferentialIntegrityError(DataFormatError):
    """An id in a serialized artifact does not resolve."""


class DimensionError(CondretError):
    """Vector/matrix shapes disagree."""


class CacheMismatchError(CondretError):
    """A backward pass received a cache from a different forward call."""


class NumericsError(CondretError):
    """Non-finite values appeared where finite ones are required."""


class TrainingDivergedError(NumericsError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class MissingGraphError(CondretError):
    """An ANN query was issued against an index without a built graph."""


class UndefinedMetricError(CondretError):
    """A metric has an empty denominator and no defined value."""


class EmptyHeldoutError(CondretError):
    """Recall was requested for a user with no heldout items (skip signal)."""
