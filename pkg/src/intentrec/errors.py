"""Exception types shared across the package."""


class IntentRecError(Exception):
    """Base class for all package errors."""


class ParseError(IntentRecError):
    """A data file could not be parsed; message carries the line number."""


class ValidationError(IntentRecError):
    """Input violates a documented precondition or schema."""


class ContractError(IntentRecError):
    """An internal operation was called with inconsistent shapes or state."""
