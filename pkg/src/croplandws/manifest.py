"""Declarative config documents: the dataset manifest, the training config
and the synthetic-world config. YAML (JSON is valid YAML) with `--set
key=value` dotted overrides; all validation errors raise ConfigError.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from .errors import ConfigError
from .fusion import ClassMapping
from .model import ModelConfig
from .synth import ProductErrorRates
from .training import TrainingConfig
from .weak_supervision import LossWeights


def load_yaml(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config document not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict) or not doc:
        raise ConfigError(f"{path} is empty or not a mapping")
    return doc


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    """Apply `a.b.c=value` overrides in place; values parse as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                node[part] = nxt
            node = nxt
        node[parts[-1]] = yaml.safe_load(raw)
    return doc


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return doc[key]


@dataclass
class SceneEntry:
    path: Path
    date: datetime.date


@dataclass
class ProductEntry:
    product_id: str
    path: Path
    mapping: ClassMapping
    temporal_mode: bool = False  # per-date class stack reduced by mode before binarization


@dataclass
class QARule:
    """How the QA band encodes clouds: value membership or bit flags."""

    band: str
    cloud_values: tuple[int, ...] = ()
    cloud_bits: tuple[int, ...] = ()

    def decode(self, qa) -> Any:
        import numpy as np

        qa = np.asarray(qa)
        if self.cloud_values:
            return np.isin(qa, self.cloud_values)
        bits = 0
        for b in self.cloud_bits:
            bits |= 1 << b
        return (qa.astype(np.int64) & bits) != 0


@dataclass
class DatasetManifest:
    name: str
    base_dir: Path
    band_names: list[str]
    scenes: list[SceneEntry]
    products: list[ProductEntry]
    qa: QARule | None = None
    max_cloud_fraction: float = 0.2
    period: str = "monthly"
    patch_size: int = 256
    stride: int = 128
    normalization: tuple[list[float], list[float]] | None = None
    splits: dict[str, list[tuple[int, int, int, int]]] = field(default_factory=dict)
    dem_path: Path | None = None
    dem_cell: float = 10.0
    reference_path: Path | None = None

    def split_windows(self, name: str) -> list[tuple[int, int, int, int]]:
        return self.splits.get(name, [])


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def load_manifest(path: str | Path, overrides: Sequence[str] = ()) -> DatasetManifest:
    path = Path(path)
    doc = apply_overrides(load_yaml(path), overrides)
    base = path.parent
    where = str(path)

    bands = _require(doc, "bands", where)
    band_names = list(_require(bands, "names", f"{where}:bands"))

    scenes = []
    for entry in doc.get("scenes", []):
        date = entry.get("date")
        if isinstance(date, str):
            try:
                date = datetime.date.fromisoformat(date)
            except ValueError as exc:
                raise ConfigError(f"{where}: bad scene date {date!r}: {exc}") from exc
        if not isinstance(date, datetime.date):
            raise ConfigError(f"{where}: scene entry needs an ISO date, got {entry.get('date')!r}")
        scenes.append(SceneEntry(path=_resolve(base, _require(entry, "path", where)), date=date))

    products = []
    for entry in _require(doc, "products", where):
        pid = _require(entry, "id", f"{where}:products")
        mapping = ClassMapping(
            product_id=pid,
            cropland_class_ids=frozenset(_require(entry, "cropland_class_ids", where)),
            nodata_class_ids=frozenset(entry.get("nodata_class_ids", ())),
            passthrough_class_ids=frozenset(entry.get("passthrough_class_ids", ())),
        )
        products.append(
            ProductEntry(
                product_id=pid,
                path=_resolve(base, _require(entry, "path", where)),
                mapping=mapping,
                temporal_mode=bool(entry.get("temporal_mode", False)),
            )
        )
    if len(products) < 2:
        raise ConfigError(f"{where}: need >= 2 products for consistency rating")

    qa = None
    if "qa" in doc:
        qa_doc = doc["qa"]
        qa = QARule(
            band=_require(qa_doc, "band", f"{where}:qa"),
            cloud_values=tuple(qa_doc.get("cloud_values", ())),
            cloud_bits=tuple(qa_doc.get("cloud_bits", ())),
        )
        if not qa.cloud_values and not qa.cloud_bits:
            raise ConfigError(f"{where}: qa rule needs cloud_values or cloud_bits")

    period = doc.get("period", "monthly")
    if period not in ("monthly", "seasonal", "annual"):
        raise ConfigError(f"{where}: period must be monthly/seasonal/annual, got {period!r}")

    norm = None
    if "normalization" in doc and doc["normalization"]:
        nd = doc["normalization"]
        norm = (list(nd["mean"]), list(nd["std"]))

    splits = {}
    for name, rects in (doc.get("splits") or {}).items():
        splits[name] = [tuple(int(v) for v in r) for r in rects]
        for r in splits[name]:
            if len(r) != 4:
                raise ConfigError(f"{where}: split rectangle must be [row0, col0, rows, cols]")

    dem_path, dem_cell = None, 10.0
    if "dem" in doc and doc["dem"]:
        dem_path = _resolve(base, _require(doc["dem"], "path", f"{where}:dem"))
        dem_cell = float(doc["dem"].get("cell_m", 10.0))

    reference = None
    if "reference" in doc and doc["reference"]:
        reference = _resolve(base, _require(doc["reference"], "path", f"{where}:reference"))

    return DatasetManifest(
        name=doc.get("name", path.stem),
        base_dir=base,
        band_names=band_names,
        scenes=scenes,
        products=products,
        qa=qa,
        max_cloud_fraction=float(doc.get("max_cloud_fraction", 0.2)),
        period=period,
        patch_size=int(doc.get("patch_size", 256)),
        stride=int(doc.get("stride", 128)),
        normalization=norm,
        splits=splits,
        dem_path=dem_path,
        dem_cell=dem_cell,
        reference_path=reference,
    )


def load_training_config(
    path: str | Path, overrides: Sequence[str] = ()
) -> tuple[ModelConfig, LossWeights, TrainingConfig]:
    doc = apply_overrides(load_yaml(path), overrides)
    where = str(path)
    try:
        model_doc = dict(doc.get("model", {}))
        if "channel_widths" in model_doc:
            model_doc["channel_widths"] = tuple(model_doc["channel_widths"])
        model_cfg = ModelConfig(**model_doc)
        weights = LossWeights(**doc.get("loss", {}))
        train_keys = {
            k: doc[k]
            for k in (
                "epochs",
                "batch_size",
                "learning_rate",
                "lr_decay_epoch",
                "learning_rate_decayed",
                "seed",
                "anchors_per_patch",
                "pool_size",
                "checkpoint_every",
                "val_every",
            )
            if k in doc
        }
        train_cfg = TrainingConfig(**train_keys)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return model_cfg, weights, train_cfg


def load_world_config(path: str | Path, overrides: Sequence[str] = ()) -> dict:
    """Synthetic-world parameters plus scene-writing options for `synth`."""
    doc = apply_overrides(load_yaml(path), overrides)
    where = str(path)
    known = {
        "size": 256,
        "terrain_mix": (0.4, 0.3, 0.3),
        "periods": 12,
        "n_products": 3,
        "channels": 4,
        "noise_sd": 0.02,
        "crop_fraction": 0.5,
        "phase_shift_months": 0.0,
        "seed": 0,
        "pixel_size": 10.0,
    }
    world = {k: doc.get(k, v) for k, v in known.items()}
    world["terrain_mix"] = tuple(world["terrain_mix"])
    rates = doc.get("error_rates")
    if rates is None:
        world["error_rates"] = ProductErrorRates()
    elif isinstance(rates, dict):
        world["error_rates"] = ProductErrorRates(**rates)
    elif isinstance(rates, list):
        world["error_rates"] = [ProductErrorRates(**r) for r in rates]
    else:
        raise ConfigError(f"{where}: error_rates must be a mapping or list of mappings")
    return {
        "world": world,
        "scenes_per_period": int(doc.get("scenes_per_period", 2)),
        "cloud_cover_range": tuple(doc.get("cloud_cover_range", (0.0, 0.3))),
        "scene_noise_sd": float(doc.get("scene_noise_sd", 0.01)),
        "patch_size": int(doc.get("patch_size", 64)),
        "stride": int(doc.get("stride", 64)),
    }
