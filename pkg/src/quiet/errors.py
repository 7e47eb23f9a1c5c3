"""Exception taxonomy shared across the package.

UserInputError subclasses map to CLI exit code 2, everything else to 1.
"""


class QuietError(Exception):
    """Base class for all package errors."""


class UserInputError(QuietError):
    """Bad input supplied by the caller (files, config, ids)."""


class ParseError(UserInputError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class BoundsError(UserInputError):
    """Node or edge id outside the valid range."""


class ShapeError(UserInputError):
    """Incompatible array shapes."""


class ConfigurationError(UserInputError):
    """Invalid or inconsistent configuration values."""


class UndefinedMetricError(UserInputError):
    """Metric is mathematically undefined on the given input."""


class ContractError(QuietError):
    """An internal API precondition was violated."""


class DivergenceError(QuietError):
    """Training produced a non-finite loss."""
