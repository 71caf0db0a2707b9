class ScanOODError(Exception):
    """Base class for package errors."""


class NoSegmentation(ScanOODError):
    """Raised when a scan has no predicted tumor voxels to anchor on."""


class DataFormatError(ScanOODError, ValueError):
    """Malformed volume, feature table, report or model file."""


class SingleClassError(ScanOODError, ValueError):
    pass


class EstimationError(ScanOODError, ArithmeticError):
    """Covariance could not be inverted."""
