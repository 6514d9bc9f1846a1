"""Exception types shared across the package.

The CLI maps these onto distinct process exit codes, so keep the
hierarchy flat and specific.
"""


class CaupsiError(Exception):
    """Base class for all package errors."""


class ConfigError(CaupsiError):
    """Invalid configuration: bad dims, unknown keys, incompatible values."""


class ShapeError(CaupsiError):
    """Runtime shape mismatch between arrays or parameters."""


class NumericError(CaupsiError):
    """Non-finite inputs or NaN/Inf appearing where finite values are required."""


class DataError(CaupsiError):
    """Dataset problems: missing files, bad manifest rows, label range."""


class ContractError(CaupsiError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""
