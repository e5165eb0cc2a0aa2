"""Exception types raised across the package."""


class MultiformerError(Exception):
    """Base class for all package errors."""


class ShapeError(MultiformerError, ValueError):
    """Tensor extents do not satisfy an operation's dimension contract."""


class ContractError(MultiformerError, ValueError):
    """A caller violated a documented precondition."""


class NumericError(MultiformerError, ValueError):
    """Non-finite values where finite input is required."""


class ConfigError(MultiformerError, ValueError):
    """Invalid model/run configuration, including checkpoint mismatches."""


class FormatError(MultiformerError, ValueError):
    """Malformed on-disk artifact (header, payload, checkpoint)."""


class SplitError(MultiformerError, ValueError):
    """Unsatisfiable stratified split request."""


class DeterminismError(MultiformerError, RuntimeError):
    """Repeated evaluations of a supposedly deterministic function differed."""


class UndefinedMetricError(MultiformerError, ValueError):
    """Metric undefined for the given confusion matrix (e.g. empty)."""


class TrainingDiverged(MultiformerError, RuntimeError):
    """Training aborted on a non-finite loss."""
