"""Exception hierarchy shared across the package."""

from __future__ import annotations


class FlowKTError(Exception):
    """Base class for all library errors."""


class ConfigurationError(FlowKTError, ValueError):
    """Invalid or unsupported configuration value."""


class DomainError(FlowKTError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ShapeError(FlowKTError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class NumericalFailure(FlowKTError, FloatingPointError):
    """A non-finite value appeared during integration."""

    def __init__(self, message: str, *, t: float | None = None, step: int | None = None):
        super().__init__(message)
        self.t = t
        self.step = step


class DivergenceError(FlowKTError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, *, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class DatasetMissingError(FlowKTError, FileNotFoundError):
    """A dataset file could not be located or parsed."""


class CheckpointVersionError(FlowKTError, ValueError):
    """Checkpoint was written by an incompatible format version."""
