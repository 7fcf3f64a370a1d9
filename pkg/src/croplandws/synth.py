"""Synthetic data for desk-scale experiments.

Two generators: (a) a corruption protocol that drops whole frames and grows
contiguous cloud blobs over a grid of spatial/temporal missing rates, and
(b) a synthetic phenology world: terrain-dependent field landscapes, per-class
seasonal reflectance curves, and M disagreeing pseudo-products derived from
the known truth by structured boundary errors, field flips and salt noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError
from .evaluation import EvalReport, confusion, map_region, metrics
from .raster import RasterGrid, TileIndex
from .sits import SITSCube

DEFAULT_SPATIAL_RATES = tuple(round(0.1 * i, 4) for i in range(5))  # 0.0 .. 0.4
DEFAULT_TEMPORAL_RATES = tuple(round(i / 12.0, 6) for i in range(11))  # 0 .. 10 of 12 months


@dataclass(frozen=True)
class CorruptionConfig:
    """Rate grid of the data-scarcity protocol. A temporal rate r drops
    round(r * T) frames; a spatial rate masks that fraction of each
    surviving frame with one contiguous blob."""

    spatial_rates: tuple[float, ...] = DEFAULT_SPATIAL_RATES
    temporal_rates: tuple[float, ...] = DEFAULT_TEMPORAL_RATES
    seed: int = 0

    def __post_init__(self) -> None:
        for r in tuple(self.spatial_rates) + tuple(self.temporal_rates):
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"rates must be in [0, 1], got {r}")


def _grow_blob(shape: tuple[int, int], target: int, rng: np.random.Generator) -> np.ndarray:
    """Contiguous random blob of exactly `target` pixels, grown from a seeded
    center by repeated dilation; the last ring is thinned at random to hit the
    target exactly (ring pixels stay attached, so connectivity is preserved)."""
    h, w = shape
    blob = np.zeros(shape, dtype=bool)
    blob[rng.integers(h), rng.integers(w)] = True
    count = 1
    while count < target:
        grown = ndimage.binary_dilation(blob)
        ring = grown & ~blob
        ring_n = int(ring.sum())
        if count + ring_n <= target:
            blob = grown
            count += ring_n
        else:
            ring_idx = np.flatnonzero(ring.reshape(-1))
            keep = rng.choice(ring_idx, size=target - count, replace=False)
            blob.reshape(-1)[keep] = True
            count = target
    return blob


def corrupt_cube(
    cube: SITSCube,
    spatial_rate: float,
    temporal_rate: float,
    seed: int,
) -> SITSCube:
    """Simulate data loss: drop round(temporal_rate * T) uniformly chosen
    frames entirely, then mask a contiguous blob of spatial_rate of the
    pixels in each surviving frame. Only validity changes; reflectance
    values are never modified."""
    if not 0.0 <= spatial_rate <= 1.0 or not 0.0 <= temporal_rate <= 1.0:
        raise ValueError("rates must be in [0, 1]")
    t, _, h, w = cube.frames.shape
    n_drop = round(temporal_rate * t)
    if n_drop >= t:
        raise DataError(f"temporal rate {temporal_rate} would drop all {t} frames")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    validity = cube.validity.copy()
    dropped = rng.choice(t, size=n_drop, replace=False) if n_drop else np.array([], dtype=int)
    validity[dropped] = 0
    target = round(spatial_rate * h * w)
    if target:
        for frame in range(t):
            if frame in set(dropped.tolist()):
                continue
            blob = _grow_blob((h, w), target, rng)
            validity[frame][blob] = 0
    return SITSCube(frames=cube.frames.copy(), period_labels=list(cube.period_labels), validity=validity)


# ---------------------------------------------------------------------------
# Synthetic phenology world
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProductErrorRates:
    """Error process of one pseudo-product: whole-field label flips,
    boundary erosion/dilation in pixels, and per-pixel salt noise.

    flip_rate is each product's marginal field-flip probability. With
    flip_correlation 0 products err independently; with correlation c > 0 a
    seeded set of "hard" fields (fraction flip_rate of all fields) is flipped
    by every product with elevated probability c + (1-c) * flip_rate while
    the rest flip with (1-c) * flip_rate, keeping the marginal rate at
    flip_rate. This emulates systematic confusions shared across real
    land-cover products, which survive unanimity filtering.
    """

    flip_rate: float = 0.1
    boundary_px: int = 1
    salt_rate: float = 0.01
    flip_correlation: float = 0.0


@dataclass
class ClassCurves:
    """Seasonal mean reflectance per class and channel.

    Cropland follows a sow-grow-harvest bump (low -> peak -> low within the
    year); non-crop vegetation follows a slightly smoother bump peaking in a
    different month. The two classes share nearly the same amplitude, so the
    discriminative signal is dominated by *when* the peak happens: the
    phenological timing the multi-temporal model is meant to exploit.
    phase_shift moves both peaks (wrapping around the year) to emulate a
    different season or year.
    """

    channels: int = 4
    crop_peak_month: float = 6.0
    noncrop_peak_month: float = 9.2
    crop_sigma: float = 1.4
    noncrop_sigma: float = 1.8
    noise_sd: float = 0.02

    def _bump(self, months: np.ndarray, mu: float, sigma: float) -> np.ndarray:
        dist = np.minimum(np.abs(months - mu), 12.0 - np.abs(months - mu))
        return np.exp(-0.5 * (dist / sigma) ** 2)

    def mean_curves(self, months: np.ndarray, phase_shift: float = 0.0) -> np.ndarray:
        """(2, C, T) array of class mean reflectance at the given months."""
        crop_mu = (self.crop_peak_month + phase_shift - 1.0) % 12.0 + 1.0
        non_mu = (self.noncrop_peak_month + phase_shift - 1.0) % 12.0 + 1.0
        crop_bump = self._bump(months, crop_mu, self.crop_sigma)
        non_bump = self._bump(months, non_mu, self.noncrop_sigma)
        base = np.linspace(0.06, 0.14, self.channels)[:, None]
        gain = np.linspace(-0.07, 0.45, self.channels)[:, None]
        crop = base + gain * crop_bump[None, :]
        non = base + gain * non_bump[None, :]
        return np.stack([non, crop])  # class 0 = non-crop, 1 = crop


@dataclass
class SyntheticWorld:
    """Ground truth plus everything derived from it."""

    grid: RasterGrid
    truth: np.ndarray  # H x W uint8 {0, 1}
    terrain: np.ndarray  # H x W uint8 {0 plain, 1 hill, 2 mountain}
    field_ids: np.ndarray  # H x W int32
    curves: ClassCurves
    products: np.ndarray  # M x H x W uint8
    product_ids: list[str]
    error_rates: list[ProductErrorRates]
    dem: np.ndarray | None = None  # synthetic elevation consistent with terrain


_FIELD_SCALES = {0: 48.0, 1: 22.0, 2: 11.0}  # mean field edge length (px) per terrain


def _terrain_zones(size: int, terrain_mix: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    mix = np.asarray(terrain_mix, dtype=np.float64)
    if mix.size != 3 or mix.min() < 0 or not math.isclose(mix.sum(), 1.0, abs_tol=1e-6):
        raise ConfigError("terrain_mix must be three nonnegative fractions summing to 1")
    rough = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8.0)
    q1, q2 = np.quantile(rough, [mix[0], mix[0] + mix[1]])
    zones = np.full((size, size), 2, dtype=np.uint8)
    zones[rough < q2] = 1
    zones[rough < q1] = 0
    return zones


def _field_tessellation(
    zones: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Voronoi field mosaic whose seed density follows the terrain class.
    Returns (field id raster, per-field terrain class)."""
    size = zones.shape[0]
    points, point_zone = [], []
    for zone, scale in _FIELD_SCALES.items():
        zone_pixels = np.argwhere(zones == zone)
        if zone_pixels.size == 0:
            continue
        n = max(1, int(round(zone_pixels.shape[0] / scale**2)))
        sel = rng.choice(zone_pixels.shape[0], size=n, replace=False)
        points.append(zone_pixels[sel])
        point_zone.append(np.full(n, zone, dtype=np.uint8))
    seeds = np.concatenate(points).astype(np.float64)
    tree = cKDTree(seeds)
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    _, field_ids = tree.query(np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1))
    return field_ids.reshape(size, size).astype(np.int32), np.concatenate(point_zone)


def _flip_fields(
    labels: np.ndarray,
    field_ids: np.ndarray,
    rates: ProductErrorRates,
    hard_fields: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    n_fields = int(field_ids.max()) + 1
    c = rates.flip_correlation
    per_field_rate = np.where(
        hard_fields[:n_fields],
        c + (1.0 - c) * rates.flip_rate,
        (1.0 - c) * rates.flip_rate,
    )
    flip = rng.random(n_fields) < per_field_rate
    out = labels.copy()
    flipped = flip[field_ids]
    out[flipped] = 1 - out[flipped]
    return out


def _make_product(
    truth: np.ndarray,
    field_ids: np.ndarray,
    rates: ProductErrorRates,
    hard_fields: np.ndarray,
    structured_dilate: bool,
    rng: np.random.Generator,
) -> np.ndarray:
    prod = _flip_fields(truth, field_ids, rates, hard_fields, rng)
    if rates.boundary_px > 0:
        op = ndimage.binary_dilation if structured_dilate else ndimage.binary_erosion
        prod = op(prod.astype(bool), iterations=rates.boundary_px).astype(np.uint8)
    if rates.salt_rate > 0:
        salt = rng.random(prod.shape) < rates.salt_rate
        prod[salt] = 1 - prod[salt]
    return prod.astype(np.uint8)


def _synthetic_dem(zones: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Elevation (meters) whose Horn slope roughly matches the terrain
    classes: near-flat plains, gentle relief in hills, steep in mountains."""
    size = zones.shape[0]
    base = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=6.0)
    base /= max(np.abs(base).max(), 1e-9)
    amplitude = np.where(zones == 0, 0.5, np.where(zones == 1, 4.0, 30.0))
    return ndimage.gaussian_filter(base * amplitude, sigma=1.0)


def generate_world(
    size: int = 256,
    terrain_mix: Sequence[float] = (0.4, 0.3, 0.3),
    periods: int = 12,
    n_products: int = 3,
    error_rates: ProductErrorRates | Sequence[ProductErrorRates] = ProductErrorRates(),
    seed: int = 0,
    channels: int = 4,
    noise_sd: float = 0.02,
    crop_fraction: float = 0.5,
    phase_shift_months: float = 0.0,
    pixel_size: float = 10.0,
) -> tuple[SyntheticWorld, SITSCube]:
    """Build a seeded synthetic world and its reflectance cube.

    Cropland pixels follow a sow-grow-harvest reflectance bump, non-crop
    vegetation a distinct smoother curve; per-pixel Gaussian noise and a
    small per-field offset are added. Each pseudo-product corrupts the truth
    independently per its error rates. Fully deterministic under a seed.
    """
    if size < 64:
        raise ConfigError(f"size must be >= 64, got {size}")
    if n_products < 2:
        raise ConfigError(f"need >= 2 pseudo-products, got {n_products}")
    if isinstance(error_rates, ProductErrorRates):
        error_rates = [error_rates] * n_products
    error_rates = list(error_rates)
    if len(error_rates) != n_products:
        raise ConfigError("one ProductErrorRates per product required")

    root = np.random.SeedSequence(seed)
    rngs = [np.random.default_rng(s) for s in root.spawn(4 + n_products)]
    zones = _terrain_zones(size, terrain_mix, rngs[0])
    field_ids, field_zone = _field_tessellation(zones, rngs[1])
    n_fields = field_zone.shape[0]
    field_is_crop = (rngs[2].random(n_fields) < crop_fraction).astype(np.uint8)
    truth = field_is_crop[field_ids]

    curves = ClassCurves(channels=channels, noise_sd=noise_sd)
    months = np.linspace(1.0, 12.0, periods) if periods != 12 else np.arange(1.0, 13.0)
    mean_curves = curves.mean_curves(months, phase_shift=phase_shift_months)  # 2 x C x T

    rng_cube = rngs[3]
    field_offset = (rng_cube.normal(0.0, 0.01, size=n_fields)).astype(np.float32)
    per_pixel = mean_curves[truth.reshape(-1)]  # N x C x T
    frames = per_pixel.T.reshape(periods, channels, size, size).astype(np.float32)
    frames = frames + field_offset[field_ids][None, None]
    frames = frames + rng_cube.normal(0.0, noise_sd, size=frames.shape).astype(np.float32)
    cube = SITSCube(
        frames=frames,
        period_labels=[int(round(m)) for m in months],
        validity=np.ones((periods, size, size), dtype=np.uint8),
    )

    # the "hard field" set is shared by all products (seeded once per world);
    # each product's marginal flip rate selects how many fields it can hit
    max_rate = max(r.flip_rate for r in error_rates)
    hard_fields = rngs[2].random(n_fields) < max_rate
    products = np.stack(
        [
            _make_product(truth, field_ids, rates, hard_fields,
                          structured_dilate=(m % 2 == 1), rng=rngs[4 + m])
            for m, rates in enumerate(error_rates)
        ]
    )
    grid = RasterGrid(width=size, height=size, origin_x=500000.0, origin_y=3000000.0,
                      pixel_size=pixel_size, crs_id="EPSG:32649")
    world = SyntheticWorld(
        grid=grid,
        truth=truth.astype(np.uint8),
        terrain=zones,
        field_ids=field_ids,
        curves=curves,
        products=products,
        product_ids=[f"pseudo_{m}" for m in range(n_products)],
        error_rates=error_rates,
        dem=_synthetic_dem(zones, rngs[0]),
    )
    return world, cube


# ---------------------------------------------------------------------------
# Robustness grid
# ---------------------------------------------------------------------------

@dataclass
class RobustnessGrid:
    spatial_rates: tuple[float, ...]
    temporal_rates: tuple[float, ...]
    reports: list[list[EvalReport]]  # indexed [spatial][temporal]

    def records(self) -> list[dict]:
        out = []
        for i, sr in enumerate(self.spatial_rates):
            for j, tr in enumerate(self.temporal_rates):
                rec = {"spatial_rate": sr, "temporal_rate": tr}
                rec.update(self.reports[i][j].as_dict())
                out.append(rec)
        return out

    def heat_table(self, metric: str = "avg_f1") -> str:
        header = "spatial\\temporal | " + " ".join(f"{r:7.4f}" for r in self.temporal_rates)
        lines = [header, "-" * len(header)]
        for i, sr in enumerate(self.spatial_rates):
            vals = " ".join(f"{getattr(self.reports[i][j], metric):7.2f}" for j in range(len(self.temporal_rates)))
            lines.append(f"{sr:16.4f} | {vals}")
        return "\n".join(lines) + "\n"


def robustness_grid(
    model,
    cube: SITSCube,
    truth: np.ndarray,
    plan: Sequence[TileIndex],
    grid: RasterGrid,
    cfg: CorruptionConfig,
    valid: np.ndarray | None = None,
) -> RobustnessGrid:
    """Evaluate a trained model over the full corruption-rate grid.

    Cells are seeded independently (derived from cfg.seed and the cell
    coordinates) so they can run in any order or in parallel; the (0, 0)
    cell is the uncorrupted evaluation.
    """
    reports: list[list[EvalReport]] = []
    for i, sr in enumerate(cfg.spatial_rates):
        row = []
        for j, tr in enumerate(cfg.temporal_rates):
            cell_seed = int(np.random.SeedSequence([cfg.seed, i, j]).generate_state(1)[0])
            corrupted = corrupt_cube(cube, sr, tr, seed=cell_seed)
            _, binary = map_region(model, corrupted, plan, grid)
            row.append(metrics(confusion(binary, truth, valid=valid)))
        reports.append(row)
    return RobustnessGrid(tuple(cfg.spatial_rates), tuple(cfg.temporal_rates), reports)
