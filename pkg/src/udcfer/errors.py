"""Exception types shared across the package.

The CLI maps these onto process exit codes, so raise the most specific
one that applies.
"""


class UdcferError(Exception):
    """Base class for all package errors."""


class ConfigError(UdcferError):
    """Invalid configuration, bad CLI arguments, out-of-range parameters."""


class DataError(UdcferError):
    """Corrupt or missing on-disk artifacts: bad magic, checksum mismatch, truncation."""


class ShapeError(UdcferError):
    """Tensor shapes incompatible with the requested operation."""


class NumericError(UdcferError):
    """Non-finite values produced by a primitive, or a non-finite loss."""
