# -*- coding: utf-8 -*-
"""アブレーション・交差検証・ノイズフロア"""

import math

import numpy as np
import pytest

from core.errors import ConfigError, DataError
from core.experiments import (
    VARIANTS, geographic_cross_validation, inference_config_for, noise_floor, run_ablation, run_variant,
    temporal_cross_validation,
)
from core.inference import InferenceConfig
from core.model import CanopyHeightModel, ModelConfig
from core.raster_io import RasterCube
from core.synthetic import SceneSpec, generate_scene
from core.trainer import DataConfig, TrainConfig, TrainSetup
from conftest import DESK_MODEL, TINY_MODEL


def _only_bands(cube: RasterCube, keep) -> RasterCube:
    index = [cube.band_ids.index(b) for b in keep]
    return RasterCube(cube.bands[index], cube.cloud_prob, cube.landcover, cube.valid, cube.gsd_m,
                      cube.acquisition_date, tuple(keep))


def test_overlap_is_widened_to_receptive_field():
    assert inference_config_for(CanopyHeightModel.build(TINY_MODEL)).overlap == 8
    desk = inference_config_for(CanopyHeightModel.build(DESK_MODEL))
    assert desk.overlap == 2 * DESK_MODEL.receptive_radius
    assert desk.tile_size == 128
    full = inference_config_for(CanopyHeightModel.build(ModelConfig(n_blocks=2, trunk_width=16,
                                                                    entry_depths=(4, 8))),
                                InferenceConfig(tile_size=8, overlap=2))
    assert full.tile_size > 2 * full.overlap


def test_noise_floor_is_small_but_positive(small_scene, small_spec):
    cubes, reference = small_scene
    floor = noise_floor(cubes, reference, small_spec)
    assert 0.0 < floor < 10.0
    everywhere = noise_floor(cubes, reference, small_spec, region=np.ones(reference.shape, dtype=bool))
    assert everywhere > 0.0


def test_noise_floor_vanishes_without_noise():
    spec = SceneSpec(seed=3, height=50, width=50, noise_sigma=0.0, date_jitter=0.0)
    cubes, reference = generate_scene(spec)
    everywhere = np.ones(reference.shape, dtype=bool)
    assert noise_floor(cubes, reference, spec, region=everywhere) < 0.05


def test_ablation_table_over_two_variants(tmp_path, small_scene, setup_factory, logger):
    cubes, reference = small_scene
    table, results = run_ablation(["ALL", "RGB"], cubes, reference, setup_factory(), tmp_path, logger=logger)
    assert list(table["variant"]) == ["ALL", "RGB"]
    assert list(table["status"]) == ["ok", "ok"]
    assert all(not r.skipped for r in results)
    assert results[1].model.config.in_channels == 3
    assert set(results[0].reports) == {"median", "mincloud"}
    assert (tmp_path / "RGB" / "best.chkp").exists()


def test_variant_without_bands_is_skipped(small_scene, setup_factory, logger):
    cubes, reference = small_scene
    rgbn_only = [_only_bands(c, ("B02", "B03", "B04", "B08")) for c in cubes]
    table, results = run_ablation(["ALL", "RGBN"], rgbn_only, reference, setup_factory(), logger=logger)
    skipped, kept = results
    assert skipped.skipped and "B01" in skipped.reason
    assert not kept.skipped
    assert table.loc[0, "status"] == "skipped"
    assert math.isnan(table.loc[0, "overall"])
    assert table.loc[1, "status"] == "ok"


def test_unknown_variant(small_scene, setup_factory):
    cubes, reference = small_scene
    with pytest.raises(DataError):
        run_variant("SWIR", cubes, reference, setup_factory())
    assert set(VARIANTS) == {"ALL", "RGB", "N", "RGBN", "woRGBN", "ALL_1x1"}


def test_temporal_cross_validation(tmp_path, small_scene, setup_factory, logger):
    cubes, reference = small_scene
    result = temporal_cross_validation(cubes, reference, setup_factory(max_iterations=2, val_every=1),
                                       tmp_path, logger=logger)
    assert list(result.folds["held_out_date"]) == [c.acquisition_date for c in cubes]
    assert result.mean_mae == pytest.approx(result.folds["mae"].mean())
    assert result.std_mae >= 0.0
    assert (tmp_path / f"fold_{cubes[0].acquisition_date}" / "best.chkp").exists()
    with pytest.raises(DataError):
        temporal_cross_validation(cubes[:1], reference, setup_factory(), logger=logger)


def test_geographic_cross_validation_holds_out_column_regions(tmp_path, small_scene, setup_factory, logger):
    cubes, reference = small_scene
    result = geographic_cross_validation(cubes, reference, setup_factory(max_iterations=2, val_every=1),
                                         n_folds=2, out_dir=tmp_path, logger=logger)
    assert list(result.folds["held_out_columns"]) == ["0-19", "20-39"]
    assert (result.folds["n_pixels"] > 0).all()
    assert result.mean_mae == pytest.approx(result.folds["mae"].mean())
    assert (tmp_path / "fold_cols_0-19" / "best.chkp").exists()
    with pytest.raises(ConfigError):
        geographic_cross_validation(cubes, reference, setup_factory(), n_folds=1, logger=logger)


@pytest.mark.slow
def test_desk_model_approaches_noise_floor(logger):
    spec = SceneSpec(seed=1, height=256, width=256, correlation_length_px=12.0, max_height_m=45.0,
                     cloud_coverage_fraction=0.2, n_dates=3)
    cubes, reference = generate_scene(spec)
    setup = TrainSetup(train=TrainConfig(base_lr=1e-4, batch_size=36, max_iterations=10000, val_every=500),
                       model=ModelConfig(trunk_width=64, n_blocks=4, entry_depths=(16, 32)),
                       data=DataConfig())
    table, results = run_ablation(["ALL", "ALL_1x1"], cubes, reference, setup, logger=logger)
    floor = noise_floor(cubes, reference, spec, max_ref=40.0)
    full, pixelwise = results
    assert full.report("median").mae <= 2.0 * floor
    assert pixelwise.report("median").mae > full.report("median").mae
