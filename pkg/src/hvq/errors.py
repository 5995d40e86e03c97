"""Exception hierarchy. Each class carries the CLI exit status it maps to."""


class HVQError(Exception):
    exit_code = 1


class ValidationError(HVQError, ValueError):
    """Bad input: shapes, ranges, non-finite values, inconsistent config."""

    exit_code = 2


class PrecisionOverflowError(ValidationError):
    """A value does not fit the requested storage precision."""


class NumericalError(HVQError, ArithmeticError):
    """Factorization or inversion failed, or a matrix is too ill-conditioned."""

    exit_code = 3


class FormatError(HVQError):
    """A container is not in the expected format (magic, version, header)."""

    exit_code = 4


class CorruptionError(FormatError):
    """A container header parsed but its payload is inconsistent with it."""
