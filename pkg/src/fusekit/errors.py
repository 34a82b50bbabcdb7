"""Exception hierarchy shared by the library and the CLI."""

from __future__ import annotations


class FusekitError(Exception):
    """Base class for all errors raised by fusekit."""

    exit_code = 3


class ValidationError(FusekitError):
    """Bad user input: invalid hyperparameters, recipes or synth specs."""

    exit_code = 1


class CompatibilityError(ValidationError):
    """Two checkpoints cannot be merged element by element."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class CheckpointFormatError(FusekitError):
    """A checkpoint file is malformed or truncated."""

    exit_code = 2


class InvariantError(FusekitError):
    """An internal consistency check failed. Always a bug."""

    exit_code = 3
