import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from croplandws.errors import DataError, GridMismatchError
from croplandws.raster import (
    RasterGrid,
    TileIndex,
    align_to_grid,
    mosaic_probabilistic,
    read_raster,
    tile_plan,
    write_raster,
)


def grid(w, h, ps=10.0, x0=0.0, y0=None, crs="EPSG:32649"):
    return RasterGrid(w, h, x0, y0 if y0 is not None else h * ps, ps, crs)


class TestRasterGrid:
    def test_invariants(self):
        with pytest.raises(ValueError):
            RasterGrid(0, 4, 0, 0, 10)
        with pytest.raises(ValueError):
            RasterGrid(4, 4, 0, 0, -1)

    def test_alignment_is_exact_field_equality(self):
        a = grid(4, 4)
        assert a.aligned_with(grid(4, 4))
        assert not a.aligned_with(grid(4, 4, x0=1.0))
        assert not a.aligned_with(grid(4, 4, crs="EPSG:4326"))


class TestTilePlan:
    def test_512_grid_gives_nine_windows(self):
        plan = tile_plan(grid(512, 512), 256, 128)
        assert len(plan) == 9
        starts = sorted({t.window[0] for t in plan})
        assert starts == [0, 128, 256]

    def test_exact_fit_single_window(self):
        plan = tile_plan(grid(256, 256), 256, 128)
        assert len(plan) == 1
        assert plan[0].window == (0, 0, 256, 256)

    def test_edge_windows_shift_inward(self):
        plan = tile_plan(grid(300, 300), 256, 128)
        assert len(plan) == 4
        assert sorted({t.window[0] for t in plan}) == [0, 44]
        assert sorted({t.window[1] for t in plan}) == [0, 44]

    def test_tile_larger_than_grid_pads(self):
        plan = tile_plan(grid(100, 80), 256, 128)
        assert len(plan) == 1
        assert plan[0].padded
        assert plan[0].window == (0, 0, 80, 100)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            tile_plan(grid(64, 64), 0, 1)
        with pytest.raises(ValueError):
            tile_plan(grid(64, 64), 32, 40)

    @given(
        size=st.integers(16, 700),
        tile=st.integers(8, 256),
        stride_frac=st.floats(0.1, 1.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_windows_cover_grid_and_stay_inside(self, size, tile, stride_frac):
        stride = max(1, int(tile * stride_frac))
        g = grid(size, size)
        covered = np.zeros((size, size), dtype=bool)
        for t in tile_plan(g, tile, stride):
            r0, c0, rows, cols = t.window
            assert r0 >= 0 and c0 >= 0
            assert r0 + rows <= size and c0 + cols <= size
            covered[r0 : r0 + rows, c0 : c0 + cols] = True
        assert covered.all()


class TestMosaic:
    def test_constant_tiles(self):
        g = grid(64, 64)
        plan = tile_plan(g, 32, 16)
        tiles = [(t, np.tile([0.3, 0.7], (32, 32, 1))) for t in plan]
        out = mosaic_probabilistic(tiles, g)
        assert np.allclose(out[..., 0], 0.3) and np.allclose(out[..., 1], 0.7)

    def test_two_tile_average(self):
        g = grid(4, 4)
        t1 = TileIndex(0, 0, (0, 0, 4, 4), 4)
        tiles = [
            (t1, np.tile([1.0, 0.0], (4, 4, 1))),
            (t1, np.tile([0.0, 1.0], (4, 4, 1))),
        ]
        out = mosaic_probabilistic(tiles, g)
        assert np.allclose(out, 0.5)

    def test_matches_per_pixel_accumulation_oracle(self):
        rng = np.random.default_rng(7)
        g = grid(48, 40)
        plan = tile_plan(g, 16, 12)
        tiles = []
        for t in plan:
            p = rng.uniform(0.01, 0.99, size=(16, 16, 3)).astype(np.float32)
            p /= p.sum(axis=2, keepdims=True)
            tiles.append((t, p))
        out = mosaic_probabilistic(tiles, g)

        # brute-force oracle: accumulate per pixel in plan order, then divide
        acc = np.zeros((40, 48, 3))
        cnt = np.zeros((40, 48))
        for t, p in tiles:
            r0, c0, rows, cols = t.window
            for i in range(rows):
                for j in range(cols):
                    acc[r0 + i, c0 + j] += p[i, j]
                    cnt[r0 + i, c0 + j] += 1
        assert np.array_equal(out, acc / cnt[..., None])
        assert np.abs(out.sum(axis=2) - 1.0).max() < 1e-6

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        g = grid(32, 32)
        plan = tile_plan(g, 16, 8)
        tiles = []
        for t in plan:
            p = rng.uniform(0.05, 0.95, size=(16, 16, 2)).astype(np.float32)
            p[..., 1] = 1.0 - p[..., 0]
            tiles.append((t, p))
        out1 = mosaic_probabilistic(tiles, g)
        out2 = mosaic_probabilistic(tiles[::-1], g)
        assert np.array_equal(out1, out2)

    def test_uncovered_pixel_rejected(self):
        g = grid(8, 8)
        t = TileIndex(0, 0, (0, 0, 4, 4), 4)
        with pytest.raises(DataError):
            mosaic_probabilistic([(t, np.full((4, 4, 2), 0.5))], g)

    def test_validity_mask_excludes_pixels(self):
        g = grid(4, 4)
        t1 = TileIndex(0, 0, (0, 0, 4, 4), 4)
        v = np.ones((4, 4), dtype=bool)
        v[0, 0] = False
        tiles = [(t1, np.tile([0.2, 0.8], (4, 4, 1))), (t1, np.tile([0.6, 0.4], (4, 4, 1)))]
        out = mosaic_probabilistic(tiles, g, validity=[v, None])
        assert np.allclose(out[0, 0], [0.6, 0.4])
        assert np.allclose(out[1, 1], [0.4, 0.6])


class TestGeoTiffIO:
    @pytest.mark.parametrize("dtype", [np.uint8, np.uint16, np.int32, np.float32, np.float64])
    def test_roundtrip_bit_exact(self, tmp_path, dtype):
        rng = np.random.default_rng(1)
        if np.issubdtype(dtype, np.floating):
            arr = rng.normal(size=(13, 17, 2)).astype(dtype)
        else:
            arr = rng.integers(0, 200, size=(13, 17, 2)).astype(dtype)
        g = grid(17, 13, ps=20.0, x0=1000.0)
        path = write_raster(tmp_path / "a.tif", g, arr, band_names=["x", "y"])
        g2, arr2, valid = read_raster(path)
        assert g2 == g
        assert arr2.dtype == dtype
        assert np.array_equal(arr, arr2)
        assert valid.all()

    def test_read_write_read_identity(self, tmp_path):
        g = grid(6, 5)
        arr = np.zeros((5, 6), dtype=np.uint8)
        p1 = write_raster(tmp_path / "z1.tif", g, arr)
        g1, a1, _ = read_raster(p1)
        p2 = write_raster(tmp_path / "z2.tif", g1, a1)
        g2, a2, _ = read_raster(p2)
        assert g1 == g2
        assert np.array_equal(a1, a2)

    def test_constant_zero_raster(self, tmp_path):
        g = grid(2, 2)
        path = write_raster(tmp_path / "c.tif", g, np.zeros((2, 2), dtype=np.int16))
        _, arr, valid = read_raster(path)
        assert np.array_equal(arr[:, :, 0], [[0, 0], [0, 0]])
        assert valid.all()

    def test_nodata_count_flagged(self, tmp_path):
        g = grid(8, 8)
        arr = np.ones((8, 8), dtype=np.uint8)
        arr[0, 0] = arr[3, 4] = arr[7, 7] = 255
        path = write_raster(tmp_path / "n.tif", g, arr, nodata=255)
        _, _, valid = read_raster(path)
        assert (~valid).sum() == 3

    def test_nan_nodata_for_floats(self, tmp_path):
        g = grid(4, 4)
        arr = np.ones((4, 4), dtype=np.float32)
        arr[1, 1] = np.nan
        path = write_raster(tmp_path / "f.tif", g, arr)
        _, _, valid = read_raster(path)
        assert (~valid).sum() == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_raster(tmp_path / "missing.tif")

    def test_unknown_band_rejected(self, tmp_path):
        g = grid(4, 4)
        path = write_raster(tmp_path / "b.tif", g, np.zeros((4, 4)), band_names=["red"])
        with pytest.raises(DataError):
            read_raster(path, band_subset=["nir"])

    def test_unreadable_format(self, tmp_path):
        bad = tmp_path / "bad.tif"
        bad.write_bytes(b"this is not a tiff")
        with pytest.raises(DataError):
            read_raster(bad)


class TestAlignToGrid:
    def test_identity(self):
        g = grid(4, 4)
        data = np.arange(16.0).reshape(4, 4)
        assert np.array_equal(align_to_grid((g, data), g), data)

    def test_nearest_upsample_repeats_blocks(self):
        src = grid(2, 2, ps=20.0)
        tgt = grid(4, 4, ps=10.0, y0=src.origin_y)
        data = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = align_to_grid((src, data), tgt, "nearest")
        assert np.array_equal(out, np.repeat(np.repeat(data, 2, 0), 2, 1))

    def test_average_downsample_checkerboard(self):
        src = grid(4, 4, ps=10.0)
        tgt = grid(2, 2, ps=20.0, y0=src.origin_y)
        data = np.indices((4, 4)).sum(axis=0) % 2
        out = align_to_grid((src, data.astype(float)), tgt, "average")
        assert np.allclose(out, 0.5)

    def test_crs_mismatch(self):
        src = grid(4, 4, crs="EPSG:4326")
        tgt = grid(4, 4, crs="EPSG:32649")
        with pytest.raises(GridMismatchError):
            align_to_grid((src, np.zeros((4, 4))), tgt)

    def test_empty_overlap(self):
        src = grid(4, 4)
        tgt = grid(4, 4, x0=1e6)
        with pytest.raises(DataError):
            align_to_grid((src, np.zeros((4, 4))), tgt)

    def test_nearest_preserves_value_set(self):
        rng = np.random.default_rng(0)
        src = grid(5, 7, ps=30.0)
        tgt = grid(13, 11, ps=10.0, y0=src.origin_y)
        data = rng.integers(0, 5, size=(7, 5))
        out = align_to_grid((src, data), tgt, "nearest")
        assert set(np.unique(out)) <= set(np.unique(data))
