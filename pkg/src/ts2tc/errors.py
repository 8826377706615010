"""Exception hierarchy shared by the toolkit and mapped onto CLI exit codes."""


class TS2TCError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 2


class DataError(TS2TCError, ValueError):
    """Malformed or out-of-contract input data (exit code 2)."""

    exit_code = 2


class NumericalError(TS2TCError, ArithmeticError):
    """Non-finite values, diverged solvers, degenerate statistics (exit code 3)."""

    exit_code = 3


class CheckpointError(DataError):
    """Unreadable, truncated or incompatible checkpoint file."""
