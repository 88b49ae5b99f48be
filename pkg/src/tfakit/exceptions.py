"""Exception types raised across the package."""


class TFAError(Exception):
    """Base class for all package errors."""


class ValidationError(TFAError, ValueError):
    """Input data violates a structural invariant."""


class NumericError(TFAError, ArithmeticError):
    """A numeric precondition failed (zero norm, non-finite value)."""


class ParseError(ValidationError):
    """A file could not be decoded into the expected format."""
