# -*- coding: utf-8 -*-
"""合成シーン生成"""

from dataclasses import replace

import numpy as np
import pytest

from core.errors import ConfigError, DataError, ShapeMismatchError
from core.preprocess import cloud_mask
from core.raster_io import LandCover, RasterCube
from core.synthetic import (
    BAND_RESPONSE, SceneSpec, deconvolve_box3, degrade_band, generate_scene, local_height_stats,
    reference_predictor,
)


def test_same_spec_gives_identical_scene(small_spec):
    cubes_a, ref_a = generate_scene(small_spec)
    cubes_b, ref_b = generate_scene(small_spec)
    assert all(a.equals(b) for a, b in zip(cubes_a, cubes_b))
    assert ref_a.equals(ref_b)


def test_other_seed_changes_scene(small_spec):
    _, ref_a = generate_scene(small_spec)
    _, ref_b = generate_scene(replace(small_spec, seed=small_spec.seed + 1))
    assert not ref_a.equals(ref_b)


def test_dates_follow_revisit_interval(small_scene):
    cubes, reference = small_scene
    assert [c.acquisition_date for c in cubes] == ["2020-01-05", "2020-01-10", "2020-01-15"]
    assert reference.shape == (40, 40)
    assert all(c.shape == (40, 40) and len(c.band_ids) == 13 for c in cubes)


def test_heights_stay_within_bounds(small_scene, small_spec):
    _, reference = small_scene
    assert reference.heights.min() >= 0.0
    assert reference.heights.max() <= small_spec.max_height_m


def test_cloud_coverage_fraction_is_honoured():
    spec = SceneSpec(seed=5, height=50, width=50, cloud_coverage_fraction=0.2, n_dates=1)
    cube = generate_scene(spec)[0][0]
    cloudy = cloud_mask(cube.cloud_prob)
    assert cloudy.mean() == pytest.approx(0.2, abs=0.01)
    assert cube.cloud_prob[~cloudy].max() <= 8.0
    assert cube.cloud_prob[cloudy].min() >= 11.0 - 1e-4


def test_near_infrared_tracks_canopy_height():
    cubes, reference = generate_scene(SceneSpec(seed=5, height=64, width=64, n_dates=2))
    for cube in cubes:
        r = np.corrcoef(cube.band("B08").ravel(), reference.heights.ravel())[0, 1]
        assert r > 0.5


def test_flat_scene_reproduces_base_reflectance():
    spec = SceneSpec(seed=2, height=24, width=24, max_height_m=0.0, noise_sigma=0.0, date_jitter=0.0,
                     n_dates=1)
    cubes, reference = generate_scene(spec)
    assert np.all(reference.heights == 0.0)
    for band in ("B02", "B08", "B11", "B01"):
        assert np.allclose(cubes[0].band(band), BAND_RESPONSE[band][0], atol=1e-6)


def test_water_pixels_have_zero_height():
    spec = SceneSpec(seed=4, height=32, width=32, water_fraction=0.25, n_dates=1)
    cubes, reference = generate_scene(spec)
    water = cubes[0].landcover == LandCover.WATER
    assert water.any()
    assert np.all(reference.heights[water] == 0.0)


def test_invalid_spec_is_a_config_error():
    with pytest.raises(ConfigError):
        SceneSpec(n_dates=0).validate()
    with pytest.raises(ConfigError):
        generate_scene(SceneSpec(cloud_coverage_fraction=1.5))
    with pytest.raises(ConfigError):
        SceneSpec(start_date="not-a-date").validate()


def test_degrade_band_keeps_constant_planes():
    plane = np.full((13, 13), 0.3)
    assert np.allclose(degrade_band(plane, 6), 0.3)
    assert degrade_band(plane, 2).shape == (13, 13)


def test_box_filter_is_inverted_exactly():
    heights = np.random.default_rng(4).uniform(0.0, 30.0, size=(50, 47))
    restored = deconvolve_box3(local_height_stats(heights)[0])
    assert np.allclose(restored, heights, atol=1e-6)


def test_reference_predictor_recovers_heights_without_noise():
    spec = SceneSpec(seed=6, height=50, width=50, noise_sigma=0.0, date_jitter=0.0, n_dates=1)
    cubes, reference = generate_scene(spec)
    predicted = reference_predictor(cubes[0], spec)
    assert predicted.valid.all()
    assert np.abs(predicted.heights - reference.heights).mean() < 0.05


def test_reference_predictor_improves_with_more_dates():
    spec = SceneSpec(seed=6, height=50, width=50, n_dates=4)
    cubes, reference = generate_scene(spec)
    single = np.abs(reference_predictor(cubes[0], spec).heights - reference.heights).mean()
    fused = np.abs(reference_predictor(cubes, spec).heights - reference.heights).mean()
    assert fused < single


def test_reference_predictor_needs_ten_metre_bands(small_scene, small_spec):
    cube = small_scene[0][0]
    keep = [i for i, b in enumerate(cube.band_ids) if b != "B08"]
    partial = RasterCube(cube.bands[keep], cube.cloud_prob, cube.landcover, cube.valid, cube.gsd_m,
                         cube.acquisition_date, tuple(cube.band_ids[i] for i in keep))
    with pytest.raises(DataError):
        reference_predictor(partial, small_spec)


def test_reference_predictor_rejects_mixed_shapes(small_spec):
    cubes, _ = generate_scene(small_spec)
    other, _ = generate_scene(replace(small_spec, height=small_spec.height + 4))
    with pytest.raises(ShapeMismatchError):
        reference_predictor([cubes[0], other[0]], small_spec)
