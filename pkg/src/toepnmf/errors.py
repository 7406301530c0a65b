"""Exception types shared across the package."""


class ToepnmfError(Exception):
    """Base class for all package-specific errors."""


class DataError(ToepnmfError):
    """Invalid or inconsistent input data (bad files, dimensions, non-finite values)."""


class NumericalError(ToepnmfError):
    """A solve or iteration failed numerically (singular system, degenerate factor)."""
