"""Satellite image time series assembly: cloud filtering and filling of
per-date scenes, periodic compositing into T x C x H x W cubes, and patch
extraction paired with quality masks and fused labels.

Cube frames store 0.0 wherever validity is 0; the validity raster is the
authority on missing data and is what the model's attention masking consumes.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DataError, GridMismatchError
from .fusion import FusedLabels, QualityMask
from .raster import TileIndex

MONTH_PERIODS = list(range(1, 13))
SEASON_PERIODS = [1, 2, 3, 4]  # winter (Dec-Feb), spring, summer, autumn
_SEASON_OF_MONTH = {12: 1, 1: 1, 2: 1, 3: 2, 4: 2, 5: 2, 6: 3, 7: 3, 8: 3, 9: 4, 10: 4, 11: 4}


@dataclass
class SceneRecord:
    """One acquisition: H x W x C reflectance plus a cloud/invalid mask."""

    timestamp: datetime.date
    bands: np.ndarray  # H x W x C float32
    cloud_mask: np.ndarray  # H x W bool, True where cloudy/invalid

    def __post_init__(self) -> None:
        self.bands = np.asarray(self.bands, dtype=np.float32)
        self.cloud_mask = np.asarray(self.cloud_mask, dtype=bool)
        if self.bands.ndim != 3:
            raise ValueError("bands must be H x W x C")
        if self.cloud_mask.shape != self.bands.shape[:2]:
            raise GridMismatchError("cloud mask shape does not match bands")

    @property
    def cloud_fraction(self) -> float:
        return float(self.cloud_mask.mean())


@dataclass
class SITSCube:
    """A periodic image time series: frames T x C x H x W with per-frame
    period labels (e.g. months 1..12) and a T x H x W validity raster."""

    frames: np.ndarray
    period_labels: list[int]
    validity: np.ndarray

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.validity = np.asarray(self.validity, dtype=np.uint8)
        if self.frames.ndim != 4:
            raise ValueError("frames must be T x C x H x W")
        t, _, h, w = self.frames.shape
        if t < 1:
            raise ValueError("need at least one frame")
        if len(self.period_labels) != t:
            raise ValueError("one period label per frame required")
        if self.validity.shape != (t, h, w):
            raise GridMismatchError("validity must be T x H x W")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape

    def window(self, tix: TileIndex) -> "SITSCube":
        """Tile-sized view of the cube (shares memory with the parent)."""
        rs, cs = tix.slices()
        return SITSCube(
            frames=self.frames[:, :, rs, cs],
            period_labels=list(self.period_labels),
            validity=self.validity[:, rs, cs],
        )

    def copy(self) -> "SITSCube":
        return SITSCube(self.frames.copy(), list(self.period_labels), self.validity.copy())


@dataclass
class PatchSample:
    """One training/inference patch: cube tile + quality mask + fused labels."""

    cube: SITSCube
    quality_mask: np.ndarray  # h x w uint8
    labels: np.ndarray  # h x w uint8 {0, 1, 255}
    tile_index: TileIndex

    def __post_init__(self) -> None:
        h, w = self.cube.frames.shape[2:]
        if self.quality_mask.shape != (h, w) or self.labels.shape != (h, w):
            raise GridMismatchError("patch rasters must share the cube tile size")


def filter_scenes(scenes: Sequence[SceneRecord], max_cloud: float) -> list[SceneRecord]:
    """Keep scenes with cloud_fraction <= max_cloud, order preserved."""
    return [s for s in scenes if s.cloud_fraction <= max_cloud]


def fill_clouds(target: SceneRecord, neighbors: Sequence[SceneRecord]) -> SceneRecord:
    """Fill each cloudy pixel from the nearest-in-time neighbor that is clear
    there. Neighbors are ranked by |timestamp - target.timestamp| (ties:
    earlier scene wins). Pixels clear in no scene keep value 0 and stay
    flagged in the returned cloud mask.
    """
    order = sorted(
        neighbors,
        key=lambda s: (abs((s.timestamp - target.timestamp).days), s.timestamp),
    )
    bands = target.bands.copy()
    remaining = target.cloud_mask.copy()
    for neighbor in order:
        if not remaining.any():
            break
        if neighbor.bands.shape != target.bands.shape:
            raise GridMismatchError("neighbor scene shape mismatch")
        fillable = remaining & ~neighbor.cloud_mask
        if fillable.any():
            bands[fillable] = neighbor.bands[fillable]
            remaining &= ~fillable
    bands[remaining] = 0.0
    return SceneRecord(timestamp=target.timestamp, bands=bands, cloud_mask=remaining)


def period_of(date: datetime.date, period: str) -> int:
    if period == "monthly":
        return date.month
    if period == "seasonal":
        return _SEASON_OF_MONTH[date.month]
    if period == "annual":
        return 1
    raise ValueError(f"unknown period {period!r}")


def period_range(period: str) -> list[int]:
    if period == "monthly":
        return list(MONTH_PERIODS)
    if period == "seasonal":
        return list(SEASON_PERIODS)
    if period == "annual":
        return [1]
    raise ValueError(f"unknown period {period!r}")


def composite(scenes: Sequence[SceneRecord], period: str = "monthly") -> SITSCube:
    """Average scenes into one frame per calendar period.

    Each frame is the per-pixel mean over cloud-free observations of its
    period; validity is 1 where at least one observation exists. Periods with
    no scene yield an all-zero frame with validity 0 (not an error: the model
    tolerates missing frames).
    """
    if not scenes:
        raise DataError("no scenes to composite")
    shape = scenes[0].bands.shape
    for s in scenes:
        if s.bands.shape != shape:
            raise GridMismatchError("all scenes must share one grid and band count")
    h, w, c = shape
    labels = period_range(period)
    frames = np.zeros((len(labels), c, h, w), dtype=np.float32)
    validity = np.zeros((len(labels), h, w), dtype=np.uint8)
    for t, lab in enumerate(labels):
        members = [s for s in scenes if period_of(s.timestamp, period) == lab]
        if not members:
            continue
        acc = np.zeros((h, w, c), dtype=np.float64)
        cnt = np.zeros((h, w), dtype=np.int64)
        for s in members:
            clear = ~s.cloud_mask
            acc[clear] += s.bands[clear]
            cnt += clear
        valid = cnt > 0
        mean = np.zeros((h, w, c), dtype=np.float64)
        mean[valid] = acc[valid] / cnt[valid, None]
        frames[t] = np.moveaxis(mean.astype(np.float32), 2, 0)
        validity[t] = valid
    return SITSCube(frames=frames, period_labels=labels, validity=validity)


def build_patches(
    cube: SITSCube,
    mask: QualityMask,
    labels: FusedLabels,
    plan: Sequence[TileIndex],
) -> list[PatchSample]:
    """Cut one PatchSample per plan window; arrays are copies, safe to mutate."""
    h, w = cube.frames.shape[2:]
    if mask.mask.shape != (h, w) or labels.labels.shape != (h, w):
        raise GridMismatchError("cube, mask and labels must share one grid")
    patches = []
    for tix in plan:
        rs, cs = tix.slices()
        patches.append(
            PatchSample(
                cube=SITSCube(
                    frames=cube.frames[:, :, rs, cs].copy(),
                    period_labels=list(cube.period_labels),
                    validity=cube.validity[:, rs, cs].copy(),
                ),
                quality_mask=mask.mask[rs, cs].copy(),
                labels=labels.labels[rs, cs].copy(),
                tile_index=tix,
            )
        )
    return patches


def channel_stats(patches: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of reflectance over valid pixels of a training
    split (PatchSamples or bare SITSCubes); frozen into the manifest or
    checkpoint and applied at model input."""
    if not patches:
        raise DataError("no patches to compute statistics from")
    cubes = [getattr(p, "cube", p) for p in patches]
    c = cubes[0].frames.shape[1]
    total = np.zeros(c, dtype=np.float64)
    total_sq = np.zeros(c, dtype=np.float64)
    n = 0
    for cube in cubes:
        valid = cube.validity.astype(bool)  # T x h x w
        vals = np.swapaxes(cube.frames, 0, 1)[:, valid]  # C x n_valid
        total += vals.sum(axis=1, dtype=np.float64)
        total_sq += (vals.astype(np.float64) ** 2).sum(axis=1)
        n += vals.shape[1]
    if n == 0:
        raise DataError("no valid pixels in the training split")
    mean = total / n
    var = np.maximum(total_sq / n - mean**2, 0.0)
    return mean, np.sqrt(var)


def normalize_frames(
    frames: np.ndarray,
    validity: np.ndarray,
    mean: np.ndarray,
    std: np.ndarray,
) -> np.ndarray:
    """Z-score frames per channel and zero out invalid pixels."""
    std_safe = np.where(std > 0, std, 1.0)
    out = (frames - mean[None, :, None, None]) / std_safe[None, :, None, None]
    return (out * validity[:, None, :, :]).astype(np.float32)
