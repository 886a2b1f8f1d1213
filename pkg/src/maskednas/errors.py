"""Exception types shared across the package."""


class MaskedNasError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(MaskedNasError):
    """Raised when an operation receives incompatible tensor shapes."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class NumericOverflowError(MaskedNasError):
    """Raised when an operation produces NaN or Inf."""


class ContractViolationError(MaskedNasError):
    """Raised when a caller breaks an operation precondition."""


class InvariantViolationError(MaskedNasError):
    """Raised when a structural invariant would be broken (e.g. an edge
    left with zero unmasked operations)."""


class ConfigurationError(MaskedNasError):
    """Raised for invalid configuration values."""


class FormatError(MaskedNasError):
    """Raised when an on-disk artifact does not match its expected format."""
