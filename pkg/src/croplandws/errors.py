"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
anything else -> 4.
"""


class CroplandWSError(Exception):
    """Base class for toolkit errors."""


class ConfigError(CroplandWSError):
    """Invalid or inconsistent configuration document."""


class DataError(CroplandWSError):
    """Input data violates a contract (missing file, bad grid, bad values)."""


class GridMismatchError(DataError):
    """Rasters expected on a common grid are not aligned."""
