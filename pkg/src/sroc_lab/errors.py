"""Exception hierarchy shared across the package.

Two roots: ConfigError for bad user input (CLI exits 1) and DataError for
malformed or insufficient data (CLI exits 2).
"""


class ConfigError(ValueError):
    """Invalid configuration, flags, or parameter combination."""


class DataError(ValueError):
    """Malformed, inconsistent, or insufficient input data."""


class NpyFormatError(DataError):
    """Unparseable NPY file; carries the byte offset of the defect."""

    def __init__(self, message: str, *, path=None, offset: int | None = None):
        detail = message
        if path is not None:
            detail = f"{path}: {detail}"
        if offset is not None:
            detail = f"{detail} (byte offset {offset})"
        super().__init__(detail)
        self.path = path
        self.offset = offset


class ShapeMismatchError(DataError):
    """Tensor shapes disagree across files or with the manifest."""


class NonFiniteError(DataError):
    """NaN or Inf encountered where finite values are required."""


class InsufficientDataError(DataError):
    """Too few samples for the requested fit or query."""


class NotSPDError(DataError):
    """Covariance matrix is not symmetric positive-definite."""


class CategoryExcludedError(DataError):
    """Category lacks enough defective validation samples for the pollution
    protocol and is excluded from experiments."""
