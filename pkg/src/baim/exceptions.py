"""Exception types shared across the package.

The CLI maps these onto exit codes: validation and configuration problems
exit with 2, I/O problems with 3 and numeric failures with 4.
"""


class BaimError(Exception):
    """Base class for all package errors."""


class ValidationError(BaimError, ValueError):
    """Input data violates a documented contract."""


class ParseError(ValidationError):
    """A dataset or config file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(BaimError, ValueError):
    """Configuration is inconsistent or does not match stored artifacts."""


class NumericError(BaimError, ArithmeticError):
    """Training produced a non-finite value."""
