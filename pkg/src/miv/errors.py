"""Exception types shared across the package.

The CLI maps these onto exit codes: validation/config problems exit with 1,
numerical failures with 2, and file-format or I/O problems with 3.
"""


class MIVError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(MIVError, ValueError):
    """Input violates a documented precondition."""


class ShapeError(ValidationError):
    pass


class ParameterError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DegenerateInputError(ValidationError):
    """Input is well-formed but numerically degenerate (zero norm, n < 2 ...)."""


class IncompletePolypError(ValidationError):
    pass


class InsufficientDataError(ValidationError):
    pass


class NumericalFailure(MIVError, ArithmeticError):
    """A non-finite value showed up where a finite one was required."""


class FormatError(MIVError, OSError):
    """Malformed or truncated file."""


class UnsupportedVersionError(FormatError):
    pass
