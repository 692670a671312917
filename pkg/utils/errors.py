"""
utils/errors.py · Exception hierarchy for ConDA Desk

Library code raises these; app.py maps them to process exit codes.
"""

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class CondaDeskError(Exception):
    """Base class. `exit_code` is the stable CLI contract."""

    exit_code = EXIT_DATA


class ConfigError(CondaDeskError, ValueError):
    exit_code = EXIT_CONFIG


class DataError(CondaDeskError, ValueError):
    exit_code = EXIT_DATA


class ShapeError(DataError):
    pass


class CapabilityError(DataError):
    """Raised when evaluation-only labels are requested for training."""


class NumericalError(CondaDeskError, ArithmeticError):
    exit_code = EXIT_NUMERIC
