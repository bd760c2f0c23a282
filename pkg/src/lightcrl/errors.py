"""Exception types raised across the package."""


class LightCRLError(Exception):
    """Base class for all errors raised by lightcrl."""


class ShapeError(LightCRLError, ValueError):
    """Operand extents are incompatible."""


class DomainError(LightCRLError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class DegenerateInputError(LightCRLError, ValueError):
    """An input is too close to a singular point (e.g. a zero-norm row)."""


class ContractError(LightCRLError, ValueError):
    """A documented precondition was violated by the caller."""


class FormatError(LightCRLError):
    """A file does not carry the expected magic or version."""


class CorruptionError(LightCRLError):
    """A file is truncated or fails its integrity check."""


class DataError(LightCRLError, ValueError):
    """A payload holds non-finite or out-of-range values."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class NumericalError(LightCRLError):
    """Training produced a non-finite loss."""
