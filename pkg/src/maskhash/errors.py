"""Exception types shared across the package.

The CLI maps these onto exit codes: ArgumentError/ConfigError -> 2,
FormatError and OS-level failures -> 3, NumericalError -> 4.
"""


class MaskHashError(Exception):
    """Base class for all package errors."""


class ArgumentError(MaskHashError, ValueError):
    """An operation was called with invalid arguments."""


class ConfigError(MaskHashError):
    """A resolved configuration is inconsistent (e.g. dimension mismatch)."""


class FormatError(MaskHashError):
    """A file failed header or shape validation; message names the field."""


class EvaluationError(MaskHashError):
    """Retrieval evaluation cannot proceed (e.g. no usable queries)."""


class NumericalError(MaskHashError):
    """Training produced non-finite parameters or losses."""
