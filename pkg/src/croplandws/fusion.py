"""Cross-product label fusion: binarize land-cover products to a common
cropland definition, rate per-pixel quality by unanimity across products,
and emit fused labels plus coverage statistics.

Binary rasters use uint8 {0, 1} with IGNORE (255) for nodata/low-quality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, GridMismatchError
from .raster import RasterGrid

IGNORE = 255


@dataclass(frozen=True)
class ClassMapping:
    """How one product's class codes map onto the binary cropland scheme.

    Codes in passthrough_class_ids are explicitly known non-cropland; in
    strict mode any code outside the three sets is an error.
    """

    product_id: str
    cropland_class_ids: frozenset[int]
    nodata_class_ids: frozenset[int] = frozenset()
    passthrough_class_ids: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        if self.cropland_class_ids & self.nodata_class_ids:
            raise ValueError(
                f"{self.product_id}: cropland and nodata class sets overlap"
            )


@dataclass
class ProductStack:
    """M aligned binary product layers (values {0, 1, IGNORE})."""

    grid: RasterGrid
    layers: np.ndarray  # M x H x W uint8
    product_ids: list[str]

    def __post_init__(self) -> None:
        self.layers = np.asarray(self.layers, dtype=np.uint8)
        if self.layers.ndim != 3:
            raise ValueError("layers must be M x H x W")
        if self.layers.shape[0] < 2:
            raise DataError(f"need >= 2 products, got {self.layers.shape[0]}")
        if self.layers.shape[1:] != self.grid.shape:
            raise GridMismatchError(
                f"layer shape {self.layers.shape[1:]} does not match grid {self.grid.shape}"
            )
        if len(self.product_ids) != self.layers.shape[0]:
            raise ValueError("one product id per layer required")
        bad = ~np.isin(self.layers, (0, 1, IGNORE))
        if bad.any():
            raise DataError("product layers must be binary (0/1) with 255 as nodata")

    @property
    def n_products(self) -> int:
        return self.layers.shape[0]


@dataclass
class QualityMask:
    """Per-pixel high-quality flag: 1 where all products agree and none is nodata."""

    grid: RasterGrid
    mask: np.ndarray  # H x W uint8 {0, 1}


@dataclass
class FusedLabels:
    """Fused labels: the unanimous product value where the mask is 1, IGNORE elsewhere."""

    grid: RasterGrid
    labels: np.ndarray  # H x W uint8 {0, 1, IGNORE}


def binarize_product(
    codes: np.ndarray,
    mapping: ClassMapping,
    strict: bool = True,
) -> np.ndarray:
    """Map a class-code raster to binary cropland {0, 1} with IGNORE nodata.

    A pixel is 1 iff its code is in cropland_class_ids; nodata codes
    propagate as IGNORE. In strict mode a code outside the declared sets
    raises; otherwise it maps to 0.
    """
    codes = np.asarray(codes)
    out = np.zeros(codes.shape, dtype=np.uint8)
    cropland = np.isin(codes, sorted(mapping.cropland_class_ids))
    nodata = np.isin(codes, sorted(mapping.nodata_class_ids))
    out[cropland] = 1
    out[nodata] = IGNORE
    if strict:
        known = sorted(
            mapping.cropland_class_ids
            | mapping.nodata_class_ids
            | mapping.passthrough_class_ids
        )
        unknown = ~np.isin(codes, known)
        if unknown.any():
            bad = sorted(np.unique(codes[unknown]).tolist())[:10]
            raise DataError(
                f"{mapping.product_id}: unmapped class codes {bad} "
                "(declare them or binarize with strict=False)"
            )
    return out


def temporal_mode(class_stack: np.ndarray, nodata: int = IGNORE) -> np.ndarray:
    """Per-pixel modal class over a T x H x W per-date class stack.

    Nodata observations are excluded; ties resolve to the lowest class code;
    pixels with no valid observation stay nodata. Used to pre-reduce
    products published per acquisition date before binarization.
    """
    stack = np.asarray(class_stack)
    if stack.ndim != 3:
        raise ValueError("class_stack must be T x H x W")
    classes = np.unique(stack)
    classes = classes[classes != nodata]
    h, w = stack.shape[1:]
    best_count = np.zeros((h, w), dtype=np.int32)
    out = np.full((h, w), nodata, dtype=stack.dtype)
    for cls in classes:  # ascending, so strict > keeps the lowest code on ties
        count = (stack == cls).sum(axis=0)
        take = count > best_count
        out[take] = cls
        best_count = np.maximum(best_count, count)
    return out


def rate_quality(stack: ProductStack) -> tuple[QualityMask, FusedLabels]:
    """Consistency rating: mask = 1 exactly where all products agree and none
    is nodata; fused labels carry the unanimous value there, IGNORE elsewhere.
    """
    layers = stack.layers
    first = layers[0]
    agree = np.ones(first.shape, dtype=bool)
    for m in range(1, stack.n_products):
        agree &= layers[m] == first
    valid = (layers != IGNORE).all(axis=0)
    mask = (agree & valid).astype(np.uint8)
    labels = np.where(mask == 1, first, IGNORE).astype(np.uint8)
    return QualityMask(stack.grid, mask), FusedLabels(stack.grid, labels)


def fusion_stats(
    mask: QualityMask,
    labels: FusedLabels,
    reference: np.ndarray | None = None,
) -> dict:
    """Coverage (label ratio) and, with a reference raster, the macro F1 of
    the fused labels over high-quality pixels."""
    m = mask.mask.astype(bool)
    stats: dict = {
        "label_ratio": float(m.mean()),
        "n_high_quality": int(m.sum()),
        "n_pixels": int(m.size),
        "label_avg_f1": None,
    }
    if reference is not None and m.any():
        from .evaluation import confusion, metrics

        ref = np.asarray(reference)
        if ref.shape != mask.mask.shape:
            raise GridMismatchError("reference shape does not match mask")
        report = metrics(confusion(labels.labels, ref, valid=m))
        stats["label_avg_f1"] = report.avg_f1
        stats["label_crop_f1"] = report.crop_f1
        stats["label_noncrop_f1"] = report.noncrop_f1
    return stats
