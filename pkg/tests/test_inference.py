# -*- coding: utf-8 -*-
"""タイル推論と多時期融合"""

import numpy as np
import pytest

from core.errors import ConfigError, MissingBandError, NumericError
from core.inference import (
    InferenceConfig, PredictionEntry, PredictionStack, TileGrid, fuse, fuse_median, fuse_min_cloud,
    measure_seam_error, per_date_spread, predict_scene, prediction_mask,
)
from core.model import CanopyHeightModel, ModelConfig
from core.preprocess import BandSubset, compute_norm_stats
from core.raster_io import HeightMap, LandCover
from utils.config_manager import ConfigManager
from conftest import DESK_MODEL, build_cube


def test_grid_covers_image_with_exact_overlap():
    grid = TileGrid.for_shape(300, 250, tile_size=128, overlap=8)
    assert [(t.row0, t.row1) for t in grid.tiles if t.col0 == 0] == [(0, 128), (120, 248), (240, 300)]
    assert np.all(grid.owner >= 0)
    for tile in grid.tiles:
        assert np.any(grid.owner[tile.rows, tile.cols] == tile.index)
    assert TileGrid.whole(30, 20).tiles[0].row1 == 30
    with pytest.raises(ConfigError):
        TileGrid.for_shape(10, 10, tile_size=8, overlap=8)


def test_owner_has_enough_context():
    grid = TileGrid.for_shape(200, 200, tile_size=64, overlap=16)
    depth = np.zeros((200, 200), dtype=np.int64)
    for tile in grid.tiles:
        mine = grid.owner[tile.rows, tile.cols] == tile.index
        depth[tile.rows, tile.cols][mine] = TileGrid.tile_depth(tile, 200, 200)[mine]
    assert depth.min() >= 8
    assert grid.exact_for_radius(8)
    assert not grid.exact_for_radius(9)


@pytest.fixture(scope="module")
def desk_setup():
    cube = build_cube(200, 200, seed=4)
    stats = compute_norm_stats([cube], BandSubset.from_name("ALL"))
    return CanopyHeightModel.build(DESK_MODEL, stats), cube


def test_tiling_matches_whole_image_with_wide_overlap(desk_setup):
    model, cube = desk_setup
    report = measure_seam_error(model, cube, overlap=2 * DESK_MODEL.receptive_radius, tile_size=128)
    assert report.exact_expected
    assert report.max_rel_error < 1e-5
    assert report.n_pixels == 200 * 200


def test_tiling_is_exact_when_size_is_not_a_tile_multiple():
    config = ModelConfig(in_channels=13, trunk_width=8, n_blocks=4, entry_depths=(4, 6))
    cube = build_cube(300, 300, seed=9)
    model = CanopyHeightModel.build(config, compute_norm_stats([cube], BandSubset.from_name("ALL")))
    grid = TileGrid.for_shape(300, 300, tile_size=128, overlap=2 * config.receptive_radius)
    assert max(t.row1 for t in grid.tiles) == 300 and max(t.col1 for t in grid.tiles) == 300
    report = measure_seam_error(model, cube, overlap=2 * config.receptive_radius, tile_size=128)
    assert report.exact_expected
    assert report.n_pixels == 300 * 300
    assert report.max_rel_error < 1e-5


def test_narrow_overlap_is_reported(desk_setup):
    model, cube = desk_setup
    report = measure_seam_error(model, cube, overlap=8, tile_size=64)
    assert not report.exact_expected
    assert report.overlap == 8
    assert report.max_abs_error > 0


def test_parallel_tiles_give_identical_output(tiny_model):
    cube = build_cube(70, 60, seed=2)
    single = predict_scene(tiny_model, cube, config=InferenceConfig(tile_size=32, overlap=8, workers=1))
    multi = predict_scene(tiny_model, cube, config=InferenceConfig(tile_size=32, overlap=8, workers=4))
    assert single.equals(multi)
    assert single.meta["acquisition_date"] == cube.acquisition_date


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.setenv("CANOPY_THREADS", "3")
    assert InferenceConfig().resolved_workers() == 3
    assert InferenceConfig(workers=2).resolved_workers() == 2
    monkeypatch.setenv("CANOPY_THREADS", "many")
    with pytest.raises(ConfigError):
        InferenceConfig().resolved_workers()


def test_masks_clouds_water_and_snow(tiny_model, tmp_path):
    landcover = np.full((8, 8), LandCover.VEGETATION, dtype=np.uint8)
    landcover[0, 0] = LandCover.WATER
    landcover[0, 1] = LandCover.SNOW
    cloud = np.zeros((8, 8), dtype=np.float32)
    cloud[1, 0] = 10.0
    cloud[1, 1] = 10.5
    cube = build_cube(8, 8, cloud_prob=cloud, landcover=landcover)
    manager = ConfigManager(tmp_path / "config")

    tropical = prediction_mask(cube, manager.get_inference_config("tropical"))
    assert not tropical[0, 0] and tropical[0, 1]
    assert tropical[1, 0] and not tropical[1, 1]
    temperate = prediction_mask(cube, manager.get_inference_config("temperate"))
    assert not temperate[0, 1]

    hmap = predict_scene(tiny_model, cube, config=manager.get_inference_config("tropical"))
    assert np.isnan(hmap.heights[0, 0])
    with pytest.raises(ConfigError):
        manager.get_inference_config("arctic")


def test_non_finite_tile_names_location(tiny_model):
    tiny_model.params["head.b"][...] = np.nan
    with pytest.raises(NumericError) as info:
        predict_scene(tiny_model, build_cube(20, 20), config=InferenceConfig(tile_size=16, overlap=4))
    assert "rows" in str(info.value)
    assert info.value.layer == "head"


def test_missing_band_rejects_prediction(tiny_model):
    cube = build_cube(8, 8, bands=("B02", "B03", "B04", "B08"))
    with pytest.raises(MissingBandError) as info:
        predict_scene(tiny_model, cube)
    assert "B01" in info.value.missing


# ---------------------------------------------------------------------------
# 融合
# ---------------------------------------------------------------------------

DATES = ["2020-05-01", "2020-01-11", "2020-03-21", "2020-02-10", "2020-04-01"]


def _random_stack(seed: int) -> PredictionStack:
    rng = np.random.default_rng(seed)
    entries = []
    for date in DATES:
        valid = rng.random((32, 32)) > 0.4
        heights = rng.uniform(0.0, 40.0, (32, 32))
        cloud = rng.integers(0, 3, (32, 32)).astype(np.float32)
        landcover = np.ones((32, 32), dtype=np.uint8)
        entries.append(PredictionEntry(HeightMap(np.where(valid, heights, np.nan), valid), cloud, landcover, date))
    return PredictionStack(entries)


@pytest.mark.parametrize("seed", range(10))
def test_median_fusion_matches_brute_force(seed):
    stack = _random_stack(seed)
    fused = fuse_median(stack)
    for r in range(32):
        for c in range(32):
            values = [e.hmap.heights[r, c] for e in stack.entries if e.hmap.valid[r, c]]
            if not values:
                assert not fused.valid[r, c]
                continue
            assert fused.heights[r, c] == pytest.approx(np.median(np.array(values, dtype=np.float64)), rel=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_min_cloud_fusion_matches_brute_force(seed):
    stack = _random_stack(seed)
    fused = fuse_min_cloud(stack)
    for r in range(32):
        for c in range(32):
            best = None
            for entry in stack.entries:
                if entry.hmap.valid[r, c] and (best is None or entry.cloud_prob[r, c] < best.cloud_prob[r, c]):
                    best = entry
            if best is None:
                assert not fused.valid[r, c]
            else:
                assert fused.heights[r, c] == best.hmap.heights[r, c]


def test_stack_is_sorted_by_date():
    stack = _random_stack(0)
    assert stack.dates == sorted(DATES)


def test_single_date_fusion_is_identity():
    stack = _random_stack(1)
    single = PredictionStack(stack.entries[:1])
    assert fuse(single, "median").equals(single.entries[0].hmap)
    assert fuse(single, "mincloud").equals(single.entries[0].hmap)
    with pytest.raises(ConfigError):
        fuse(single, "mean")


def test_per_date_spread_uses_sample_deviation():
    stack = _random_stack(2)
    reference = HeightMap(np.full((32, 32), 20.0), np.ones((32, 32), dtype=bool))
    spread = per_date_spread(stack, reference)
    expected = [np.mean(np.abs(e.hmap.heights[e.hmap.valid].astype(np.float64) - 20.0)) for e in stack.entries]
    assert np.allclose(spread.maes, expected)
    assert spread.std == pytest.approx(np.std(expected, ddof=1))
    assert spread.dates == tuple(sorted(DATES))


def test_from_predictions_pairs_cubes(tiny_model):
    cubes = [build_cube(12, 12, date=d, seed=i) for i, d in enumerate(["2020-02-01", "2020-01-01"])]
    hmaps = [predict_scene(tiny_model, c) for c in cubes]
    stack = PredictionStack.from_predictions(hmaps, cubes)
    assert stack.dates == ["2020-01-01", "2020-02-01"]
    assert stack.entries[0].hmap is hmaps[1]
