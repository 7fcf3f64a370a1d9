"""Georeferenced raster grids, tiled GeoTIFF I/O, tiling plans and mosaicking.

Rasters are north-up, row-major arrays on a square-pixel grid. The grid origin
is the outer corner of the top-left pixel; pixel (i, j) has its center at
(origin_x + (j + 0.5) * pixel_size, origin_y - (i + 0.5) * pixel_size).

Files are written as tiled GeoTIFFs through tifffile, carrying the standard
GeoTIFF tags (ModelPixelScale, ModelTiepoint, GeoKeyDirectory, GDAL_NODATA)
plus a JSON ImageDescription with band names, so they open in GDAL/QGIS.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import tifffile

from .errors import DataError, GridMismatchError

_TAG_MODEL_PIXEL_SCALE = 33550
_TAG_MODEL_TIEPOINT = 33922
_TAG_GEO_KEY_DIRECTORY = 34735
_TAG_GDAL_NODATA = 42113


@dataclass(frozen=True)
class RasterGrid:
    """Spatial footprint of a raster: size, placement and CRS identifier.

    Two grids are aligned iff all five fields compare equal; no tolerance is
    applied, inputs are expected to be produced on a shared grid upstream.
    """

    width: int
    height: int
    origin_x: float
    origin_y: float
    pixel_size: float
    crs_id: str = "EPSG:4326"

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"grid size must be positive, got {self.width}x{self.height}")
        if self.pixel_size <= 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")

    @property
    def origin(self) -> tuple[float, float]:
        return (self.origin_x, self.origin_y)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def aligned_with(self, other: "RasterGrid") -> bool:
        return self == other

    def window_grid(self, row0: int, col0: int, rows: int, cols: int) -> "RasterGrid":
        """Grid metadata of a pixel window of this grid."""
        return RasterGrid(
            width=cols,
            height=rows,
            origin_x=self.origin_x + col0 * self.pixel_size,
            origin_y=self.origin_y - row0 * self.pixel_size,
            pixel_size=self.pixel_size,
            crs_id=self.crs_id,
        )


@dataclass(frozen=True)
class TileIndex:
    """One window of a sliding-tile plan.

    window is (row0, col0, rows, cols) in parent-grid pixels. padded is set
    only when the requested tile exceeded the grid and a single full-grid
    window was emitted instead.
    """

    tile_row: int
    tile_col: int
    window: tuple[int, int, int, int]
    stride: int
    padded: bool = False

    @property
    def row0(self) -> int:
        return self.window[0]

    @property
    def col0(self) -> int:
        return self.window[1]

    @property
    def rows(self) -> int:
        return self.window[2]

    @property
    def cols(self) -> int:
        return self.window[3]

    def slices(self) -> tuple[slice, slice]:
        r0, c0, rows, cols = self.window
        return (slice(r0, r0 + rows), slice(c0, c0 + cols))


def _axis_starts(size: int, tile: int, stride: int) -> list[int]:
    """Window start offsets along one axis; the last window is shifted inward
    so it ends exactly at the grid edge."""
    starts = list(range(0, size - tile + 1, stride))
    if starts[-1] + tile < size:
        starts.append(size - tile)
    return starts


def tile_plan(grid: RasterGrid, tile: int, stride: int) -> list[TileIndex]:
    """Sliding-window plan covering the full grid.

    Interior windows overlap by (tile - stride); edge windows are shifted
    inward so every window lies fully inside the grid. A tile larger than the
    grid yields a single full-grid window flagged as padded.
    """
    if tile <= 0:
        raise ValueError(f"tile must be positive, got {tile}")
    if not 0 < stride <= tile:
        raise ValueError(f"stride must be in (0, tile], got {stride}")
    if tile > grid.width or tile > grid.height:
        return [TileIndex(0, 0, (0, 0, grid.height, grid.width), stride, padded=True)]

    row_starts = _axis_starts(grid.height, tile, stride)
    col_starts = _axis_starts(grid.width, tile, stride)
    plan = []
    for ti, r0 in enumerate(row_starts):
        for tj, c0 in enumerate(col_starts):
            plan.append(TileIndex(ti, tj, (r0, c0, tile, tile), stride))
    return plan


def align_to_grid(
    source: tuple[RasterGrid, np.ndarray],
    target: RasterGrid,
    resampling: str = "nearest",
) -> np.ndarray:
    """Resample a raster onto another grid in the same CRS.

    nearest: each target pixel center takes the covering source pixel, so the
    output value set is a subset of the input's. average: each target pixel is
    the mean of the source pixels whose centers fall inside it (NaN source
    pixels are skipped; target pixels with no contributors become NaN).
    Reprojection is out of scope: the CRS identifiers must match, and the
    grids must overlap.
    """
    src_grid, data = source
    if src_grid.crs_id != target.crs_id:
        raise GridMismatchError(f"CRS mismatch: {src_grid.crs_id} vs {target.crs_id}")
    if data.shape[:2] != src_grid.shape:
        raise ValueError(f"array shape {data.shape[:2]} does not match grid {src_grid.shape}")

    src_x0, src_y0, sps = src_grid.origin_x, src_grid.origin_y, src_grid.pixel_size
    tgt_x0, tgt_y0, tps = target.origin_x, target.origin_y, target.pixel_size

    # bounding boxes (x: [x0, x0+w*ps], y: [y0-h*ps, y0])
    overlap_x = min(src_x0 + src_grid.width * sps, tgt_x0 + target.width * tps) - max(src_x0, tgt_x0)
    overlap_y = min(src_y0, tgt_y0) - max(src_y0 - src_grid.height * sps, tgt_y0 - target.height * tps)
    if overlap_x <= 0 or overlap_y <= 0:
        raise DataError("source and target grids do not overlap")

    if resampling == "nearest":
        jt = np.arange(target.width)
        it = np.arange(target.height)
        xs = tgt_x0 + (jt + 0.5) * tps
        ys = tgt_y0 - (it + 0.5) * tps
        js = np.floor((xs - src_x0) / sps).astype(np.int64)
        is_ = np.floor((src_y0 - ys) / sps).astype(np.int64)
        js = np.clip(js, 0, src_grid.width - 1)
        is_ = np.clip(is_, 0, src_grid.height - 1)
        return data[np.ix_(is_, js)]

    if resampling == "average":
        js = np.arange(src_grid.width)
        is_ = np.arange(src_grid.height)
        sx = src_x0 + (js + 0.5) * sps
        sy = src_y0 - (is_ + 0.5) * sps
        tj = np.floor((sx - tgt_x0) / tps).astype(np.int64)
        ti = np.floor((tgt_y0 - sy) / tps).astype(np.int64)
        in_j = (tj >= 0) & (tj < target.width)
        in_i = (ti >= 0) & (ti < target.height)

        values = data.astype(np.float64)
        extra = values.shape[2:]
        acc = np.zeros(target.shape + extra, dtype=np.float64)
        cnt = np.zeros(target.shape, dtype=np.int64)
        ii, jj = np.meshgrid(is_[in_i], js[in_j], indexing="ij")
        vti, vtj = np.meshgrid(ti[in_i], tj[in_j], indexing="ij")
        vals = values[ii, jj]
        ok = np.isfinite(vals)
        if extra:
            ok = ok.all(axis=-1)
        np.add.at(acc, (vti[ok], vtj[ok]), vals[ok])
        np.add.at(cnt, (vti[ok], vtj[ok]), 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = acc / (cnt if not extra else cnt[..., None])
        out[cnt == 0] = np.nan
        return out

    raise ValueError(f"unknown resampling {resampling!r}; use 'nearest' or 'average'")


def mosaic_probabilistic(
    tiles: Sequence[tuple[TileIndex, np.ndarray]],
    grid: RasterGrid,
    validity: Sequence[np.ndarray] | None = None,
) -> np.ndarray:
    """Average overlapping per-tile probability maps into one H x W x K raster.

    Each covered pixel becomes the arithmetic mean of the probability vectors
    of all tiles covering it; accumulation runs in float64 so the result is
    independent of tile order. An optional per-tile validity mask excludes
    nodata pixels from the mean.
    """
    if not tiles:
        raise ValueError("no tiles to mosaic")
    k = tiles[0][1].shape[-1]
    if k < 2:
        raise ValueError(f"need >= 2 probability channels, got {k}")
    acc = np.zeros((grid.height, grid.width, k), dtype=np.float64)
    cnt = np.zeros((grid.height, grid.width), dtype=np.int64)
    for idx, (tix, probs) in enumerate(tiles):
        r0, c0, rows, cols = tix.window
        if probs.shape != (rows, cols, k):
            raise ValueError(
                f"tile {idx} has shape {probs.shape}, window expects {(rows, cols, k)}"
            )
        if r0 < 0 or c0 < 0 or r0 + rows > grid.height or c0 + cols > grid.width:
            raise ValueError(f"tile {idx} window {tix.window} exceeds grid {grid.shape}")
        sl = tix.slices()
        if validity is not None and validity[idx] is not None:
            v = validity[idx].astype(bool)
            acc[sl][v] += probs[v]
            cnt[sl] += v
        else:
            acc[sl] += probs
            cnt[sl] += 1
    if (cnt == 0).any():
        n = int((cnt == 0).sum())
        raise DataError(f"{n} pixels are covered by no tile")
    return acc / cnt[..., None]


# ---------------------------------------------------------------------------
# GeoTIFF I/O
# ---------------------------------------------------------------------------

def _geokey_directory(crs_id: str) -> list[int]:
    """Minimal GeoKeyDirectory: model type + EPSG code when parseable."""
    epsg = 0
    if crs_id.upper().startswith("EPSG:"):
        try:
            epsg = int(crs_id.split(":", 1)[1])
        except ValueError:
            epsg = 0
    geographic = 4000 <= epsg < 5000
    # header: version, revision, minor, number of keys
    keys = [1, 1, 0, 2]
    keys += [1024, 0, 1, 2 if geographic else 1]  # GTModelType
    if geographic:
        keys += [2048, 0, 1, epsg]  # GeographicType
    else:
        keys += [3072, 0, 1, epsg if epsg else 32767]  # ProjectedCSType
    return keys


def write_raster(
    path: str | Path,
    grid: RasterGrid,
    data: np.ndarray,
    band_names: Sequence[str] | None = None,
    nodata: float | int | None = None,
) -> Path:
    """Write an H x W or H x W x B array as a tiled GeoTIFF."""
    path = Path(path)
    arr = np.asarray(data)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[:2] != grid.shape:
        raise ValueError(f"array shape {arr.shape[:2]} does not match grid {grid.shape}")
    nbands = arr.shape[2]
    if band_names is None:
        band_names = [f"band_{b + 1}" for b in range(nbands)]
    if len(band_names) != nbands:
        raise ValueError(f"{len(band_names)} band names for {nbands} bands")

    desc = json.dumps(
        {
            "band_names": list(band_names),
            "crs_id": grid.crs_id,
            "nodata": None if nodata is None else float(nodata),
        }
    )
    geokeys = _geokey_directory(grid.crs_id)
    extratags = [
        (_TAG_MODEL_PIXEL_SCALE, "d", 3, (grid.pixel_size, grid.pixel_size, 0.0)),
        (_TAG_MODEL_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, grid.origin_x, grid.origin_y, 0.0)),
        (_TAG_GEO_KEY_DIRECTORY, "H", len(geokeys), geokeys),
    ]
    if nodata is not None:
        nd = str(int(nodata)) if float(nodata).is_integer() else repr(float(nodata))
        extratags.append((_TAG_GDAL_NODATA, "s", 0, nd))

    tile = (min(256, 16 * math.ceil(grid.height / 16)), min(256, 16 * math.ceil(grid.width / 16)))
    path.parent.mkdir(parents=True, exist_ok=True)
    planar = np.ascontiguousarray(np.moveaxis(arr, 2, 0))
    kwargs = {"planarconfig": "separate"} if nbands > 1 else {}
    tifffile.imwrite(
        path,
        planar if nbands > 1 else planar[0],
        tile=tile,
        photometric="minisblack",
        description=desc,
        extratags=extratags,
        metadata=None,
        **kwargs,
    )
    return path


def read_raster(
    path: str | Path,
    band_subset: Sequence[str] | None = None,
) -> tuple[RasterGrid, np.ndarray, np.ndarray]:
    """Read a GeoTIFF written by write_raster (or compatible).

    Returns (grid, H x W x B array, H x W validity mask). Validity is False
    where the declared nodata value (or NaN for float rasters) occurs in any
    requested band.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"raster not found: {path}")
    try:
        with tifffile.TiffFile(path) as tf:
            page = tf.pages[0]
            arr = tf.asarray()
            tags = page.tags
            scale = tags.valueof(_TAG_MODEL_PIXEL_SCALE)
            tiepoint = tags.valueof(_TAG_MODEL_TIEPOINT)
            description = page.description
    except (tifffile.TiffFileError, ValueError) as exc:
        raise DataError(f"unreadable raster {path}: {exc}") from exc

    if arr.ndim == 2:
        arr = arr[None, :, :]
    arr = np.moveaxis(arr, 0, 2)  # -> H x W x B

    meta: dict = {}
    if description:
        try:
            meta = json.loads(description)
        except json.JSONDecodeError:
            meta = {}
    band_names = meta.get("band_names") or [f"band_{b + 1}" for b in range(arr.shape[2])]
    nodata = meta.get("nodata")

    if scale is None or tiepoint is None:
        raise DataError(f"{path} carries no GeoTIFF georeferencing tags")
    grid = RasterGrid(
        width=arr.shape[1],
        height=arr.shape[0],
        origin_x=float(tiepoint[3]),
        origin_y=float(tiepoint[4]),
        pixel_size=float(scale[0]),
        crs_id=meta.get("crs_id", "EPSG:4326"),
    )

    if band_subset is not None:
        missing = [b for b in band_subset if b not in band_names]
        if missing:
            raise DataError(f"bands {missing} not in {path} (has {band_names})")
        sel = [band_names.index(b) for b in band_subset]
        arr = arr[:, :, sel]

    validity = np.ones(arr.shape[:2], dtype=bool)
    if np.issubdtype(arr.dtype, np.floating):
        validity &= np.isfinite(arr).all(axis=2)
    if nodata is not None:
        validity &= (arr != np.asarray(nodata, dtype=arr.dtype)).all(axis=2)
    return grid, arr, validity
