"""
backend/errors.py
Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI uses when the error
escapes a command:
  0 success / 2 config error / 3 data error / 4 numerical failure
"""


class CellSegError(Exception):
    """Base class for every error raised on purpose by this package."""
    exit_code = 1


class ConfigError(CellSegError):
    """Invalid or unknown configuration value."""
    exit_code = 2


class DataError(CellSegError):
    """Missing, malformed or mismatched input data."""
    exit_code = 3


class NumericalError(CellSegError):
    """A computation produced a value it must never produce."""
    exit_code = 4


class DimensionError(CellSegError, ValueError):
    """Array shapes are incompatible for the requested operation."""
    exit_code = 3


class NonFiniteError(NumericalError):
    """An operation produced NaN or Inf."""
    pass


class NonFiniteLossError(NumericalError):
    """A training batch produced a non-finite loss."""

    def __init__(self, batch_index: int, message: str):
        super().__init__(f"batch {batch_index}: {message}")
        self.batch_index = batch_index


class TapeError(CellSegError, RuntimeError):
    """backward() was called with a loss it cannot differentiate."""
    exit_code = 4


class CheckpointError(DataError):
    """Checkpoint file cannot be used."""
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    """Checkpoint was written for a different network configuration."""
    exit_code = 2


class GenerationError(DataError):
    """Scene generator could not place cells within its retry budget."""
    pass


class EmptyReportError(DataError, ValueError):
    pass
