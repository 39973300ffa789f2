"""Exception types shared by every module in the package."""


class TbuError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(TbuError):
    """Invalid configuration value or inconsistent option combination."""


class ParseError(TbuError):
    """Malformed input file; the message names the offending row."""


class TrainingError(TbuError):
    """Training diverged; the message names the epoch."""


class ShapeError(TbuError):
    """Array shape does not match the model or posterior."""


class BudgetError(TbuError):
    """Selection budget cannot be satisfied by the candidate set."""


class IntegrityError(TbuError):
    """Internal consistency violation: stray indices or a malformed trace."""


class NumericError(TbuError):
    """Non-finite values where finite numerics are required."""
