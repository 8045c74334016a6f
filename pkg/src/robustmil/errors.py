"""Exception hierarchy. ``exit_code`` is what the CLI returns."""

from __future__ import annotations


class RobustMilError(Exception):
    exit_code = 1


class ConfigError(RobustMilError, ValueError):
    exit_code = 2


class DataError(RobustMilError, ValueError):
    exit_code = 3


class IntegrityError(DataError):
    """Corrupt or truncated file on disk."""


class NumericError(RobustMilError, ArithmeticError):
    exit_code = 4

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DimensionError(DataError):
    """Feature width does not match the network input width."""
