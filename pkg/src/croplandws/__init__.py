"""Weakly supervised cropland mapping from satellite image time series.

The toolkit fuses existing land-cover products into high-quality pseudo
labels, trains a multi-temporal encoder-decoder on them with an intrinsic
feature-similarity regularizer, and maps/evaluates at raster scale.
"""

from .errors import ConfigError, CroplandWSError, DataError, GridMismatchError
from .raster import RasterGrid, TileIndex, tile_plan

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CroplandWSError",
    "DataError",
    "GridMismatchError",
    "RasterGrid",
    "TileIndex",
    "tile_plan",
    "__version__",
]
