"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so library code should raise the most
specific class available rather than a bare ``ValueError``.
"""


class SharedBasisError(Exception):
    """Base class for all package errors."""


class ConfigError(SharedBasisError, ValueError):
    """Invalid user configuration or violated input precondition."""


class NumericalError(SharedBasisError, ArithmeticError):
    """A computation produced non-finite values or could not proceed."""


class DecodeError(SharedBasisError, ValueError):
    """An EMB1 container could not be decoded."""


class BadMagicError(DecodeError):
    pass


class TruncatedPayloadError(DecodeError):
    pass


class UnknownDtypeError(DecodeError):
    pass


class BundleError(SharedBasisError, ValueError):
    """A model bundle on disk or in memory violates its invariants."""
