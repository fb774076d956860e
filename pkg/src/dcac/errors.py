"""Exception types raised across the package.

Every error carries enough structure (a field, dimension or row) that callers
can react programmatically instead of parsing messages.
"""


class DcacError(Exception):
    """Base class for all package errors."""


class ShapeError(DcacError, ValueError):
    """A tensor had the wrong rank or extent.

    ``dim`` names the offending dimension (e.g. ``"channels"``, ``"height"``).
    """

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class ConfigError(DcacError, ValueError):
    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class DataError(DcacError, ValueError):
    """Malformed dataset input. ``row`` is 1-based and counts the header."""

    def __init__(self, message, row=None):
        super().__init__(f"row {row}: {message}" if row is not None else message)
        self.row = row


class ImageFormatError(DataError):
    pass


class CheckpointError(DcacError):
    pass


class NumericalError(DcacError, FloatingPointError):
    pass
