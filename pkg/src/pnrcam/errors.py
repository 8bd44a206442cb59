"""Exception hierarchy.

Each family carries the process exit code used by the command-line interface.
"""


class PnrcamError(Exception):
    exit_code = 1


class ConfigError(PnrcamError, ValueError):
    """Invalid parameters or configuration."""

    exit_code = 2


class NumericalError(PnrcamError, ArithmeticError):
    exit_code = 3


class UndefinedStatisticError(NumericalError):
    """A statistic (g2, correlation, ...) is undefined for the given input."""


class InfiniteSNRError(NumericalError):
    """The noise reference probability is exactly zero."""


class StarvedConditionError(NumericalError):
    """A conditioning rule selected no events (or zero probability mass)."""


class TruncationError(NumericalError):
    """Log-space evaluation overflowed for the requested truncation order."""


class DivergenceError(NumericalError):
    """The reconstruction objective stopped decreasing."""


class DataFormatError(PnrcamError, ValueError):
    """Malformed input file. ``offset`` is a byte offset or line number."""

    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at {offset})"
        super().__init__(message)
        self.offset = offset
