"""Shared exception types."""


class FeatError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(FeatError):
    """Input shape is inconsistent with what an operation expects."""


class ParseError(FeatError):
    """A file artifact is malformed.

    Carries the 1-based line number of the offending line when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(FeatError):
    """A configuration value or combination of values is invalid."""


class NumericsError(FeatError):
    """A numerical computation produced or received non-finite values."""
