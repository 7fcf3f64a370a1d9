"""Command-line entry point.

Commands: fuse, prepare, train, continue, map, eval, robustness, synth and
the pipeline meta-command chaining fuse -> prepare -> train -> map -> eval on
a synthetic fixture. All experiment parameters live in config documents;
flags only select configs, output locations and `--set key=value` overrides.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.
The patch-store location defaults to $CROPLANDWS_CACHE when set.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, CroplandWSError, DataError
from .evaluation import (
    confusion,
    map_region,
    metrics,
    slope_stratify,
    stratified_report,
    write_report,
)
from .fusion import IGNORE, FusedLabels, ProductStack, QualityMask, binarize_product, fusion_stats, rate_quality, temporal_mode
from .manifest import (
    DatasetManifest,
    apply_overrides,
    load_manifest,
    load_training_config,
    load_world_config,
    load_yaml,
)
from .model import InferenceModel
from .raster import RasterGrid, TileIndex, read_raster, tile_plan, write_raster
from .sits import SceneRecord, SITSCube, build_patches, channel_stats, composite, fill_clouds, filter_scenes
from .synth import CorruptionConfig, _grow_blob, generate_world, robustness_grid
from .training import TrainingConfig, continue_train, train

CROP_CODE, NONCROP_CODE = 40, 10


def _store_dir(out_dir: Path, manifest: DatasetManifest, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    cache = os.environ.get("CROPLANDWS_CACHE")
    if cache:
        return Path(cache) / manifest.name
    return out_dir / "store"


def _grid_from_meta(meta: dict) -> RasterGrid:
    g = meta["grid"]
    return RasterGrid(g["width"], g["height"], g["origin_x"], g["origin_y"], g["pixel_size"], g["crs_id"])


def _grid_to_meta(grid: RasterGrid) -> dict:
    return {
        "width": grid.width,
        "height": grid.height,
        "origin_x": grid.origin_x,
        "origin_y": grid.origin_y,
        "pixel_size": grid.pixel_size,
        "crs_id": grid.crs_id,
    }


def plan_for_rects(
    grid: RasterGrid,
    rects: list[tuple[int, int, int, int]],
    tile: int,
    stride: int,
) -> list[TileIndex]:
    """Tile plans of the given pixel rectangles, windows offset into the
    parent grid. No rectangles means the full grid."""
    if not rects:
        return tile_plan(grid, tile, stride)
    plan: list[TileIndex] = []
    for r0, c0, rows, cols in rects:
        if r0 < 0 or c0 < 0 or r0 + rows > grid.height or c0 + cols > grid.width:
            raise DataError(f"split rectangle {(r0, c0, rows, cols)} exceeds grid {grid.shape}")
        sub = grid.window_grid(r0, c0, rows, cols)
        for tix in tile_plan(sub, tile, stride):
            w = tix.window
            plan.append(TileIndex(tix.tile_row, tix.tile_col, (w[0] + r0, w[1] + c0, w[2], w[3]), stride, tix.padded))
    return plan


# ---------------------------------------------------------------------------
# Command implementations (also importable for tests and demos)
# ---------------------------------------------------------------------------

def run_fuse(manifest: DatasetManifest, out_dir: Path) -> dict:
    """Binarize every product, rate cross-product consistency, write the
    high-quality mask, the fused labels and a stats record."""
    fusion_dir = out_dir / "fusion"
    grid = None
    layers = []
    for entry in manifest.products:
        pgrid, codes, valid = read_raster(entry.path)
        if grid is None:
            grid = pgrid
        elif pgrid != grid:
            raise DataError(f"product {entry.product_id} grid differs from {manifest.products[0].product_id}")
        if entry.temporal_mode:
            codes = temporal_mode(np.moveaxis(codes, 2, 0))
        else:
            codes = codes[:, :, 0]
        binary = binarize_product(codes, entry.mapping)
        binary[~valid] = IGNORE
        layers.append(binary)
    stack = ProductStack(grid, np.stack(layers), [e.product_id for e in manifest.products])
    mask, labels = rate_quality(stack)

    reference = None
    if manifest.reference_path is not None:
        _, ref, _ = read_raster(manifest.reference_path)
        reference = ref[:, :, 0]
    stats = fusion_stats(mask, labels, reference)

    mask_path = write_raster(fusion_dir / "mask.tif", grid, mask.mask, band_names=["high_quality"])
    labels_path = write_raster(fusion_dir / "labels.tif", grid, labels.labels, band_names=["cropland"], nodata=IGNORE)
    stats_path = fusion_dir / "stats.json"
    stats_path.write_text(json.dumps(stats, indent=2) + "\n")
    return {"mask": mask_path, "labels": labels_path, "stats": stats_path, "grid": grid}


def _read_scene(entry, manifest: DatasetManifest, grid: RasterGrid) -> SceneRecord:
    from .raster import align_to_grid

    wanted = list(manifest.band_names) + ([manifest.qa.band] if manifest.qa else [])
    sgrid, arr, valid = read_raster(entry.path, band_subset=wanted)
    if sgrid != grid:
        if (sgrid.crs_id != grid.crs_id):
            raise DataError(f"scene {entry.path} CRS differs from dataset grid")
        arr = align_to_grid((sgrid, arr), grid, resampling="nearest")
        valid = align_to_grid((sgrid, valid.astype(np.uint8)), grid, resampling="nearest").astype(bool)
    nb = len(manifest.band_names)
    bands = arr[:, :, :nb].astype(np.float32)
    cloudy = ~valid
    if manifest.qa:
        cloudy = cloudy | manifest.qa.decode(arr[:, :, nb])
    return SceneRecord(timestamp=entry.date, bands=bands, cloud_mask=cloudy)


def run_prepare(manifest: DatasetManifest, out_dir: Path, store: str | None = None) -> Path:
    """Scenes -> cloud filter -> gap fill -> periodic composite; writes the
    cube plus normalization statistics (train split) into the patch store."""
    if not manifest.scenes:
        raise ConfigError("manifest lists no scenes")
    ref_grid, _, _ = read_raster(manifest.products[0].path)
    scenes = [_read_scene(e, manifest, ref_grid) for e in manifest.scenes]
    kept = filter_scenes(scenes, manifest.max_cloud_fraction)
    if not kept:
        raise DataError(
            f"no scene passes the {manifest.max_cloud_fraction:.0%} cloud threshold"
        )
    filled = [fill_clouds(s, [o for o in kept if o is not s]) for s in kept]
    cube = composite(filled, period=manifest.period)

    train_plan = plan_for_rects(ref_grid, manifest.split_windows("train"), manifest.patch_size, manifest.stride)
    windows = [cube.window(tix) for tix in train_plan]
    mean, std = channel_stats(windows)

    store_dir = _store_dir(out_dir, manifest, store)
    store_dir.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        store_dir / "cube.npz",
        frames=cube.frames,
        validity=cube.validity,
        period_labels=np.asarray(cube.period_labels),
    )
    meta = {
        "grid": _grid_to_meta(ref_grid),
        "normalization": {"mean": mean.tolist(), "std": std.tolist()},
        "patch_size": manifest.patch_size,
        "stride": manifest.stride,
        "period": manifest.period,
        "n_scenes_total": len(scenes),
        "n_scenes_kept": len(kept),
    }
    (store_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return store_dir


def _load_store(store_dir: Path) -> tuple[SITSCube, dict]:
    cube_path, meta_path = store_dir / "cube.npz", store_dir / "meta.json"
    if not cube_path.exists() or not meta_path.exists():
        raise DataError(f"patch store incomplete at {store_dir} (run `prepare` first)")
    with np.load(cube_path) as z:
        cube = SITSCube(z["frames"], [int(p) for p in z["period_labels"]], z["validity"])
    return cube, json.loads(meta_path.read_text())


def _load_fusion(out_dir: Path, grid: RasterGrid) -> tuple[QualityMask, FusedLabels]:
    fusion_dir = out_dir / "fusion"
    mg, mask_arr, _ = read_raster(fusion_dir / "mask.tif")
    lg, labels_arr, _ = read_raster(fusion_dir / "labels.tif")
    if mg != grid or lg != grid:
        raise DataError("fusion rasters are not on the dataset grid")
    return QualityMask(grid, mask_arr[:, :, 0]), FusedLabels(grid, labels_arr[:, :, 0])


def _val_fn_from(cube: SITSCube, mask: QualityMask, labels: FusedLabels, plan):
    """Per-epoch validation against the fused (pseudo) labels on mask=1 pixels."""

    def val_fn(inference: InferenceModel) -> dict:
        cm = None
        for tix in plan:
            probs = inference.predict_probabilities(cube.window(tix))
            binary = (probs[1] > probs[0]).astype(np.uint8)
            rs, cs = tix.slices()
            sel = (mask.mask[rs, cs] == 1) & (labels.labels[rs, cs] != IGNORE)
            if not sel.any():
                continue
            c = confusion(binary, labels.labels[rs, cs], valid=sel)
            cm = c if cm is None else cm + c
        if cm is None:
            return {"avg_f1": None}
        rep = metrics(cm)
        return {"avg_f1": rep.avg_f1, "oa": rep.oa, "miou": rep.miou}

    return val_fn


def run_train(
    manifest: DatasetManifest,
    train_config_path: Path,
    out_dir: Path,
    overrides=(),
    store: str | None = None,
    continue_from: str | None = None,
) -> Path:
    model_cfg, weights, train_cfg = load_training_config(train_config_path, overrides)
    store_dir = _store_dir(out_dir, manifest, store)
    cube, meta = _load_store(store_dir)
    grid = _grid_from_meta(meta)
    mask, labels = _load_fusion(out_dir, grid)

    plan = plan_for_rects(grid, manifest.split_windows("train"), manifest.patch_size, manifest.stride)
    dataset = build_patches(cube, mask, labels, plan)
    norm = meta.get("normalization")
    norm_stats = (np.asarray(norm["mean"]), np.asarray(norm["std"])) if norm else None

    val_fn = None
    if train_cfg.val_every:
        val_plan = plan_for_rects(grid, manifest.split_windows("val"), manifest.patch_size, manifest.patch_size)
        val_fn = _val_fn_from(cube, mask, labels, val_plan)

    model_cfg_resolved = model_cfg
    if model_cfg.input_channels != cube.frames.shape[1]:
        from dataclasses import replace

        model_cfg_resolved = replace(model_cfg, input_channels=cube.frames.shape[1])

    train_dir = out_dir / "train"
    if continue_from:
        result = continue_train(continue_from, dataset, weights, train_cfg, train_dir, val_fn=val_fn)
    else:
        result = train(dataset, model_cfg_resolved, weights, train_cfg, train_dir, norm_stats=norm_stats, val_fn=val_fn)
    return result.checkpoint


def run_map(checkpoint: Path, manifest: DatasetManifest, out_dir: Path, store: str | None = None) -> dict:
    store_dir = _store_dir(out_dir, manifest, store)
    cube, meta = _load_store(store_dir)
    grid = _grid_from_meta(meta)
    model = InferenceModel.from_checkpoint(checkpoint)
    if model.model.cfg.input_channels != cube.frames.shape[1]:
        raise DataError(
            f"checkpoint expects {model.model.cfg.input_channels} channels, store cube has {cube.frames.shape[1]}"
        )
    plan = tile_plan(grid, manifest.patch_size, manifest.stride)
    probs, binary = map_region(model, cube, plan, grid)
    map_dir = out_dir / "map"
    prob_path = write_raster(
        map_dir / "probabilities.tif", grid, probs.astype(np.float32),
        band_names=["p_noncrop", "p_crop"],
    )
    binary_path = write_raster(map_dir / "cropland.tif", grid, binary, band_names=["cropland"], nodata=IGNORE)
    return {"probabilities": prob_path, "cropland": binary_path}


def run_eval(
    prediction: Path,
    reference: Path,
    out_dir: Path,
    dem: Path | None = None,
    dem_cell: float = 10.0,
) -> Path:
    _, pred, pvalid = read_raster(prediction)
    _, ref, rvalid = read_raster(reference)
    pred, ref = pred[:, :, 0], ref[:, :, 0]
    valid = pvalid & rvalid & (pred != IGNORE) & (ref != IGNORE)
    cm = confusion(pred, ref, valid=valid)
    report = metrics(cm)
    stratified = None
    if dem is not None:
        _, dem_arr, dem_valid = read_raster(dem)
        strata = slope_stratify(dem_arr[:, :, 0], dem_cell, dem_valid)
        stratified = stratified_report(pred, ref, valid, strata)
    return write_report(out_dir / "eval" / "report.txt", report, cm, stratified)


def run_robustness(
    checkpoint: Path,
    manifest: DatasetManifest,
    out_dir: Path,
    corruption: CorruptionConfig,
    store: str | None = None,
) -> Path:
    if manifest.reference_path is None:
        raise ConfigError("robustness evaluation needs a reference raster in the manifest")
    store_dir = _store_dir(out_dir, manifest, store)
    cube, meta = _load_store(store_dir)
    grid = _grid_from_meta(meta)
    _, ref, rvalid = read_raster(manifest.reference_path)
    model = InferenceModel.from_checkpoint(checkpoint)
    plan = tile_plan(grid, manifest.patch_size, manifest.stride)
    grid_result = robustness_grid(model, cube, ref[:, :, 0], plan, grid, corruption, valid=rvalid)
    rob_dir = out_dir / "robustness"
    rob_dir.mkdir(parents=True, exist_ok=True)
    with open(rob_dir / "grid.jsonl", "w") as fh:
        for rec in grid_result.records():
            fh.write(json.dumps(rec) + "\n")
    (rob_dir / "heat.txt").write_text(grid_result.heat_table())
    return rob_dir


def run_synth(world_cfg: dict, out_dir: Path) -> Path:
    """Materialize a synthetic dataset on disk: per-date scene rasters with a
    QA band, pseudo-product class rasters, truth, DEM, and a manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    world, cube = generate_world(**world_cfg["world"])
    grid = world.grid
    size = grid.height
    rng = np.random.default_rng(np.random.SeedSequence([world_cfg["world"]["seed"], 7]))

    band_names = [f"band_{i + 1}" for i in range(cube.frames.shape[1])]
    scene_entries = []
    lo, hi = world_cfg["cloud_cover_range"]
    for t, month in enumerate(cube.period_labels):
        for s in range(world_cfg["scenes_per_period"]):
            date = datetime.date(2020, int(month), min(5 + 10 * s, 28))
            bands = np.moveaxis(cube.frames[t], 0, 2).copy()
            bands += rng.normal(0.0, world_cfg["scene_noise_sd"], size=bands.shape).astype(np.float32)
            frac = float(rng.uniform(lo, hi))
            qa = np.zeros((size, size), dtype=np.uint8)
            target = round(frac * size * size)
            if target:
                qa[_grow_blob((size, size), target, rng)] = 1
            path = out_dir / "scenes" / f"{date.isoformat()}.tif"
            write_raster(path, grid, np.dstack([bands, qa.astype(np.float32)]), band_names=band_names + ["qa"])
            scene_entries.append({"path": str(path.relative_to(out_dir)), "date": date.isoformat()})

    product_entries = []
    for m, pid in enumerate(world.product_ids):
        codes = np.where(world.products[m] == 1, CROP_CODE, NONCROP_CODE).astype(np.uint8)
        path = out_dir / "products" / f"{pid}.tif"
        write_raster(path, grid, codes, band_names=["class"], nodata=IGNORE)
        product_entries.append(
            {
                "id": pid,
                "path": str(path.relative_to(out_dir)),
                "cropland_class_ids": [CROP_CODE],
                "nodata_class_ids": [IGNORE],
                "passthrough_class_ids": [NONCROP_CODE],
            }
        )

    write_raster(out_dir / "truth.tif", grid, world.truth, band_names=["cropland"], nodata=IGNORE)
    write_raster(out_dir / "dem.tif", grid, world.dem.astype(np.float32), band_names=["elevation"])

    manifest_doc = {
        "name": "synthetic-world",
        "crs_id": grid.crs_id,
        "bands": {"names": band_names, "resolutions_m": [grid.pixel_size] * len(band_names)},
        "qa": {"band": "qa", "cloud_values": [1]},
        "max_cloud_fraction": 0.2,
        "period": "monthly",
        "patch_size": world_cfg["patch_size"],
        "stride": world_cfg["stride"],
        "scenes": scene_entries,
        "products": product_entries,
        "splits": {
            "train": [[0, 0, size, size]],
            "val": [[0, 0, size, size]],
        },
        "dem": {"path": "dem.tif", "cell_m": grid.pixel_size},
        "reference": {"path": "truth.tif"},
    }
    import yaml

    manifest_path = out_dir / "manifest.yaml"
    manifest_path.write_text(yaml.safe_dump(manifest_doc, sort_keys=False))
    return manifest_path


def run_pipeline(world_config: Path, train_config: Path, out_dir: Path, overrides=()) -> Path:
    """CI entry point: synth -> fuse -> prepare -> train -> map -> eval."""
    world_cfg = load_world_config(world_config, overrides)
    manifest_path = run_synth(world_cfg, out_dir / "dataset")
    manifest = load_manifest(manifest_path)
    print(f"[pipeline] synthetic dataset at {manifest_path}")
    run_fuse(manifest, out_dir)
    print("[pipeline] fused labels written")
    run_prepare(manifest, out_dir)
    print("[pipeline] patch store prepared")
    ckpt = run_train(manifest, train_config, out_dir, overrides=overrides)
    print(f"[pipeline] checkpoint at {ckpt}")
    maps = run_map(ckpt, manifest, out_dir)
    print(f"[pipeline] maps at {maps['cropland']}")
    report = run_eval(maps["cropland"], manifest.reference_path, out_dir,
                      dem=manifest.dem_path, dem_cell=manifest.dem_cell)
    print(f"[pipeline] evaluation report at {report}")
    return report


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="croplandws",
        description="Weakly supervised cropland mapping from satellite image time series",
    )
    parser.add_argument("--jobs", type=int, default=0, help="cap worker threads (0 = library default)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True, out=True):
        if manifest:
            p.add_argument("--manifest", required=True, help="dataset manifest document")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="config override (repeatable)")

    common(sub.add_parser("fuse", help="fuse product labels into quality-rated labels"))
    p = sub.add_parser("prepare", help="build composited cubes and the patch store")
    common(p)
    p.add_argument("--store", help="patch store directory (default $CROPLANDWS_CACHE or OUT/store)")
    p = sub.add_parser("train", help="train the weakly supervised model")
    common(p)
    p.add_argument("--train-config", required=True)
    p.add_argument("--store")
    p = sub.add_parser("continue", help="continue training from a checkpoint on new data")
    common(p)
    p.add_argument("--train-config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store")
    p = sub.add_parser("map", help="tile, predict and mosaic a region")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store")
    p = sub.add_parser("eval", help="accuracy assessment of a binary map")
    common(p, manifest=False)
    p.add_argument("--prediction", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--dem")
    p.add_argument("--dem-cell", type=float, default=10.0)
    p = sub.add_parser("robustness", help="evaluate over the corruption-rate grid")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corruption-config")
    p.add_argument("--store")
    p = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    common(p, manifest=False)
    p.add_argument("--world-config", required=True)
    p = sub.add_parser("pipeline", help="synth + fuse + prepare + train + map + eval")
    common(p, manifest=False)
    p.add_argument("--world-config", required=True)
    p.add_argument("--train-config", required=True)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.jobs:
        import torch

        torch.set_num_threads(args.jobs)
    try:
        out = Path(args.out)
        if args.command == "fuse":
            paths = run_fuse(load_manifest(args.manifest, args.overrides), out)
            print(f"fused labels: {paths['labels']}\nstats: {paths['stats']}")
        elif args.command == "prepare":
            store = run_prepare(load_manifest(args.manifest, args.overrides), out, store=args.store)
            print(f"patch store: {store}")
        elif args.command == "train":
            ckpt = run_train(load_manifest(args.manifest), Path(args.train_config), out,
                             overrides=args.overrides, store=args.store)
            print(f"checkpoint: {ckpt}")
        elif args.command == "continue":
            ckpt = run_train(load_manifest(args.manifest), Path(args.train_config), out,
                             overrides=args.overrides, store=args.store, continue_from=args.checkpoint)
            print(f"checkpoint: {ckpt}")
        elif args.command == "map":
            paths = run_map(Path(args.checkpoint), load_manifest(args.manifest, args.overrides), out, store=args.store)
            print(f"cropland map: {paths['cropland']}")
        elif args.command == "eval":
            report = run_eval(Path(args.prediction), Path(args.reference), out,
                              dem=Path(args.dem) if args.dem else None, dem_cell=args.dem_cell)
            print(f"report: {report}")
            print(report.read_text())
        elif args.command == "robustness":
            if args.corruption_config:
                doc = apply_overrides(load_yaml(args.corruption_config), args.overrides)
                corr = CorruptionConfig(
                    spatial_rates=tuple(doc.get("spatial_rates", CorruptionConfig.spatial_rates)),
                    temporal_rates=tuple(doc.get("temporal_rates", CorruptionConfig.temporal_rates)),
                    seed=int(doc.get("seed", 0)),
                )
            else:
                corr = CorruptionConfig()
            rob = run_robustness(Path(args.checkpoint), load_manifest(args.manifest), out, corr, store=args.store)
            print(f"robustness grid: {rob}")
        elif args.command == "synth":
            manifest_path = run_synth(load_world_config(args.world_config, args.overrides), out)
            print(f"manifest: {manifest_path}")
        elif args.command == "pipeline":
            report = run_pipeline(Path(args.world_config), Path(args.train_config), out, overrides=args.overrides)
            print(report.read_text())
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except CroplandWSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # pragma: no cover - safety net
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
