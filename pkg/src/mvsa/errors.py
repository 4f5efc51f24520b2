"""Exception hierarchy shared by the library and the CLI.

The CLI maps these onto exit codes: UsageError -> 1, DataError and
ConfigError -> 2, NumericError and ShapeError -> 3.
"""


class MvsaError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(MvsaError):
    """Bad command line invocation."""


class ConfigError(MvsaError):
    """Invalid or inconsistent configuration value."""


class DataError(MvsaError):
    """Malformed input data or file format violation."""


class ShapeError(MvsaError):
    """Tensor shapes incompatible with the requested operation."""


class NumericError(MvsaError):
    """Non-finite values or numerically invalid state."""
