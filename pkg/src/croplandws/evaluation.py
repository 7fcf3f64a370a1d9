"""Accuracy assessment and large-area inference.

Confusion matrices follow the convention rows = reference {non-crop, crop},
columns = prediction. All derived metrics are percentages kept at full
precision; rounding (half-up, 2 decimals) happens only at serialization.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, fields
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DataError, GridMismatchError
from .raster import RasterGrid, TileIndex, mosaic_probabilistic

PLAIN, HILL, MOUNTAIN, UNKNOWN_STRATUM = 0, 1, 2, 255
STRATUM_NAMES = {PLAIN: "plain", HILL: "hill", MOUNTAIN: "mountain"}


@dataclass
class ConfusionMatrix:
    """2x2 counts; rows = reference {non-crop, crop}, cols = prediction."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (2, 2):
            raise ValueError("counts must be 2x2")
        if (self.counts < 0).any():
            raise ValueError("counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def normalized(self, by: str = "total") -> np.ndarray:
        """Area ratios: 'total' divides by all pixels, 'row' by reference class size."""
        c = self.counts.astype(np.float64)
        if by == "total":
            return c / max(c.sum(), 1)
        if by == "row":
            rows = c.sum(axis=1, keepdims=True)
            return np.divide(c, rows, out=np.zeros_like(c), where=rows > 0)
        raise ValueError(f"unknown normalization {by!r}")


@dataclass
class EvalReport:
    """Accuracy metrics in percent. F1 values are the harmonic means of their
    PA/UA pairs; avg_f1 is the macro mean of the two class F1 scores."""

    oa: float
    miou: float
    avg_f1: float
    crop_f1: float
    noncrop_f1: float
    pa_crop: float
    ua_crop: float
    pa_noncrop: float
    ua_noncrop: float
    iou_crop: float
    iou_noncrop: float
    degenerate: list[str] = field(default_factory=list)

    def as_dict(self, rounded: bool = True) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and rounded:
                v = round_percent(v)
            out[f.name] = v
        return out


def round_percent(value: float, decimals: int = 2) -> float:
    """Round half-up, the convention used for all serialized percentages."""
    q = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_UP))


def confusion(
    pred: np.ndarray,
    ref: np.ndarray,
    valid: np.ndarray | None = None,
) -> ConfusionMatrix:
    """Tally a 2x2 confusion matrix over valid pixels."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise GridMismatchError(f"pred {pred.shape} vs ref {ref.shape}")
    if valid is None:
        valid = np.ones(pred.shape, dtype=bool)
    else:
        valid = np.asarray(valid).astype(bool)
        if valid.shape != pred.shape:
            raise GridMismatchError("valid mask shape mismatch")
    if not valid.any():
        raise DataError("no valid pixels to evaluate")
    p = pred[valid].astype(np.int64)
    r = ref[valid].astype(np.int64)
    counts = np.bincount(r * 2 + p, minlength=4).reshape(2, 2)
    return ConfusionMatrix(counts)


def _per_class(cm: np.ndarray, cls: int) -> tuple[float, float, float, float]:
    """(pa, ua, iou, f1) in percent for one class index; degenerate -> 0."""
    tp = cm[cls, cls]
    fn = cm[cls, 1 - cls]
    fp = cm[1 - cls, cls]
    pa = 100.0 * tp / (tp + fn) if tp + fn > 0 else 0.0
    ua = 100.0 * tp / (tp + fp) if tp + fp > 0 else 0.0
    iou = 100.0 * tp / (tp + fp + fn) if tp + fp + fn > 0 else 0.0
    f1 = 2.0 * pa * ua / (pa + ua) if pa + ua > 0 else 0.0
    return pa, ua, iou, f1


def metrics(cm: ConfusionMatrix) -> EvalReport:
    """Derive OA, per-class PA/UA/IoU/F1, mIoU and macro F1 from counts."""
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total <= 0:
        raise DataError("empty confusion matrix")
    oa = 100.0 * np.trace(c) / total
    pa_nc, ua_nc, iou_nc, f1_nc = _per_class(c, 0)
    pa_c, ua_c, iou_c, f1_c = _per_class(c, 1)
    degenerate = []
    if pa_nc + ua_nc == 0:
        degenerate.append("noncrop")
    if pa_c + ua_c == 0:
        degenerate.append("crop")
    return EvalReport(
        oa=oa,
        miou=(iou_nc + iou_c) / 2.0,
        avg_f1=(f1_nc + f1_c) / 2.0,
        crop_f1=f1_c,
        noncrop_f1=f1_nc,
        pa_crop=pa_c,
        ua_crop=ua_c,
        pa_noncrop=pa_nc,
        ua_noncrop=ua_nc,
        iou_crop=iou_c,
        iou_noncrop=iou_nc,
        degenerate=degenerate,
    )


def report_from_rates(
    pa_crop: float,
    ua_crop: float,
    pa_noncrop: float,
    ua_noncrop: float,
    scale: int = 10**12,
) -> EvalReport:
    """Reconstruct a confusion matrix consistent with published PA/UA pairs
    (percent) and run the standard metric derivation on it.

    The four rates determine the matrix up to total size; `scale` sets TP for
    the crop class, large enough that integer rounding is negligible.
    """
    for name, v in (("pa_crop", pa_crop), ("ua_crop", ua_crop), ("ua_noncrop", ua_noncrop)):
        if not 0 < v <= 100:
            raise ValueError(f"{name} must be in (0, 100], got {v}")
    tp = float(scale)
    fn = tp * (100.0 - pa_crop) / pa_crop
    fp = tp * (100.0 - ua_crop) / ua_crop
    tn = fn * ua_noncrop / (100.0 - ua_noncrop) if ua_noncrop < 100 else fn * 1e12
    counts = np.rint([[tn, fp], [fn, tp]]).astype(np.int64)
    return metrics(ConfusionMatrix(counts))


# ---------------------------------------------------------------------------
# Terrain stratification
# ---------------------------------------------------------------------------

@dataclass
class TerrainStrata:
    """Per-pixel slope (degrees) and terrain class, thresholded at 2 and 6
    degrees (left-closed intervals): plain [0,2), hill [2,6), mountain >=6."""

    slope: np.ndarray
    classes: np.ndarray  # uint8, UNKNOWN_STRATUM where DEM was nodata


def horn_slope(dem: np.ndarray, cell: float) -> np.ndarray:
    """Slope in degrees by Horn's 3x3 weighted-gradient method with
    edge-replicated borders."""
    z = np.pad(np.asarray(dem, dtype=np.float64), 1, mode="edge")
    a, b, c = z[:-2, :-2], z[:-2, 1:-1], z[:-2, 2:]
    d, f = z[1:-1, :-2], z[1:-1, 2:]
    g, h, i = z[2:, :-2], z[2:, 1:-1], z[2:, 2:]
    dzdx = ((c + 2 * f + i) - (a + 2 * d + g)) / (8.0 * cell)
    dzdy = ((g + 2 * h + i) - (a + 2 * b + c)) / (8.0 * cell)
    return np.degrees(np.arctan(np.hypot(dzdx, dzdy)))


def classify_slope(slope: np.ndarray, dem_valid: np.ndarray | None = None) -> np.ndarray:
    """Terrain class from slope degrees; intervals are left-closed, so exactly
    2 degrees is hill and exactly 6 is mountain."""
    classes = np.full(slope.shape, PLAIN, dtype=np.uint8)
    classes[slope >= 2.0] = HILL
    classes[slope >= 6.0] = MOUNTAIN
    if dem_valid is not None:
        classes[~np.asarray(dem_valid).astype(bool)] = UNKNOWN_STRATUM
    return classes


def slope_stratify(
    dem: np.ndarray,
    cell: float,
    dem_valid: np.ndarray | None = None,
) -> TerrainStrata:
    """Classify terrain from a DEM (meters) on a square grid of `cell` meters."""
    slope = horn_slope(dem, cell)
    return TerrainStrata(slope=slope, classes=classify_slope(slope, dem_valid))


def stratified_report(
    pred: np.ndarray,
    ref: np.ndarray,
    valid: np.ndarray | None,
    strata: TerrainStrata,
) -> dict[str, EvalReport]:
    """One EvalReport per terrain stratum; empty strata are absent."""
    if valid is None:
        valid = np.ones(np.asarray(pred).shape, dtype=bool)
    out: dict[str, EvalReport] = {}
    for code, name in STRATUM_NAMES.items():
        sel = valid & (strata.classes == code)
        if not sel.any():
            continue
        out[name] = metrics(confusion(pred, ref, valid=sel))
    return out


# ---------------------------------------------------------------------------
# Tiled inference
# ---------------------------------------------------------------------------

def map_region(
    model,
    cube,
    plan: Sequence[TileIndex],
    grid: RasterGrid,
) -> tuple[np.ndarray, np.ndarray]:
    """Slide a model over a region and merge tile probabilities.

    `model` needs a predict_probabilities(cube_tile) -> K x h x w method
    (trained checkpoints and test stubs both satisfy it). Returns the
    H x W x K mosaicked probability raster and the argmax binary map, with
    probability ties resolved to non-crop.
    """
    tiles = []
    for tix in plan:
        probs = model.predict_probabilities(cube.window(tix))
        tiles.append((tix, np.moveaxis(np.asarray(probs, dtype=np.float64), 0, 2)))
    prob_raster = mosaic_probabilistic(tiles, grid)
    binary = (prob_raster[:, :, 1] > prob_raster[:, :, 0]).astype(np.uint8)
    return prob_raster, binary


def export_pixel_embeddings(
    model,
    patches: Sequence,
    sample_count: int,
    seed: int,
    path: str | Path,
) -> Path:
    """Write a deterministic sample of per-pixel feature-space vectors with
    their reference labels to a CSV (pixel_id, label, z_0..z_{D-1}).

    Sampling is uniform without replacement over all pixels of all patches;
    asking for more pixels than exist exports every pixel once.
    """
    path = Path(path)
    rows: list[tuple[int, int, np.ndarray]] = []
    pixel_id = 0
    for patch in patches:
        feats = model.feature_space(patch.cube)  # D x h x w
        d, hh, ww = feats.shape
        labels = np.asarray(patch.labels).reshape(-1)
        flat = feats.reshape(d, -1).T
        for k in range(flat.shape[0]):
            rows.append((pixel_id, int(labels[k]), flat[k]))
            pixel_id += 1
    rng = np.random.default_rng(seed)
    n = min(sample_count, len(rows))
    chosen = sorted(rng.choice(len(rows), size=n, replace=False)) if n else []
    dim = rows[0][2].shape[0] if rows else 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pixel_id", "label"] + [f"z_{i}" for i in range(dim)])
        for k in chosen:
            pid, lab, vec = rows[k]
            writer.writerow([pid, lab] + [repr(float(v)) for v in vec])
    return path


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------

def render_report(
    report: EvalReport,
    cm: ConfusionMatrix | None = None,
    title: str = "accuracy assessment",
) -> str:
    """Machine-readable key=value block plus a small rendered table."""
    lines = [f"# {title}"]
    for key, value in report.as_dict().items():
        if key == "degenerate":
            if value:
                lines.append(f"degenerate = {','.join(value)}")
            continue
        lines.append(f"{key} = {value:.2f}")
    if cm is not None:
        lines.append("")
        lines.append("confusion_counts (rows=reference, cols=prediction):")
        lines.append(f"{'':>12}{'pred:non-crop':>16}{'pred:crop':>12}")
        for cls, name in enumerate(("non-crop", "crop")):
            row = cm.counts[cls]
            lines.append(f"{'ref:' + name:>12}{row[0]:>16}{row[1]:>12}")
        for norm in ("total", "row"):
            ratios = cm.normalized(norm)
            lines.append(f"confusion_{norm}_ratio = "
                         + " ".join(f"{v:.6f}" for v in ratios.reshape(-1)))
    return "\n".join(lines) + "\n"


def write_report(
    path: str | Path,
    report: EvalReport,
    cm: ConfusionMatrix | None = None,
    stratified: Mapping[str, EvalReport] | None = None,
    title: str = "accuracy assessment",
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = render_report(report, cm, title=title)
    if stratified:
        for name, rep in stratified.items():
            text += "\n" + render_report(rep, title=f"stratum: {name}")
    path.write_text(text)
    return path
