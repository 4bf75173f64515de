# -*- coding: utf-8 -*-
"""シーンデータ管理"""

import numpy as np
import pytest

from core.data_manager import DataManager
from core.errors import DataError
from core.preprocess import BandSubset, compute_norm_stats
from conftest import build_cube


@pytest.fixture
def scene_dir(tmp_path, small_scene):
    cubes, reference = small_scene
    manager = DataManager(tmp_path / "scene", create=True)
    manager.save_scene(cubes, reference, {"scene_spec": {"seed": 3}})
    return manager


def test_round_trip_scene(scene_dir, small_scene):
    cubes, reference = small_scene
    loaded = scene_dir.load_cubes()
    assert [c.acquisition_date for c in loaded] == [c.acquisition_date for c in cubes]
    assert np.array_equal(loaded[0].bands, cubes[0].bands, equal_nan=True)
    assert scene_dir.load_reference().equals(reference)
    assert scene_dir.load_info() == {"scene_spec": {"seed": 3}}
    assert scene_dir.get_all_dates() == [c.acquisition_date for c in cubes]


def test_statistics(scene_dir, small_scene):
    cubes, reference = small_scene
    stats = scene_dir.get_statistics()
    assert stats["n_dates"] == len(cubes)
    assert stats["shape"] == [40, 40]
    assert stats["reference_valid_pixels"] == int(reference.valid.sum())
    assert set(stats["cloudy_fraction"]) == {c.acquisition_date for c in cubes}


def test_delete_cube(scene_dir, small_scene):
    cubes, _ = small_scene
    date = cubes[0].acquisition_date
    assert scene_dir.delete_cube(date)
    assert not scene_dir.delete_cube(date)
    assert date not in scene_dir.get_all_dates()
    with pytest.raises(DataError):
        scene_dir.load_cube(date)


def test_missing_directory_and_files(tmp_path):
    with pytest.raises(DataError):
        DataManager(tmp_path / "nowhere")
    manager = DataManager(tmp_path / "empty", create=True)
    with pytest.raises(DataError):
        manager.load_cubes()
    with pytest.raises(DataError):
        manager.load_reference()
    assert manager.load_info() == {}


def test_duplicate_dates_are_rejected(tmp_path):
    manager = DataManager(tmp_path / "dup", create=True)
    with pytest.raises(DataError):
        manager.save_scene([build_cube(date="2020-01-05"), build_cube(date="2020-01-05", seed=1)])


def test_mixed_shapes_are_rejected(tmp_path):
    manager = DataManager(tmp_path / "mixed", create=True)
    manager.save_scene([build_cube(8, 8, date="2020-01-05"), build_cube(10, 8, date="2020-01-10")])
    with pytest.raises(DataError):
        manager.load_cubes()


def test_norm_stats_file(tmp_path, small_scene):
    cubes, _ = small_scene
    stats = compute_norm_stats(cubes, BandSubset.from_name("RGBN"))
    path = DataManager.save_norm_stats(stats, tmp_path / "norm_stats.json")
    loaded = DataManager.load_norm_stats(path)
    assert loaded.band_ids == stats.band_ids
    assert np.allclose(loaded.mean, stats.mean) and np.allclose(loaded.std, stats.std)
    path.write_text("{}", encoding="utf-8")
    with pytest.raises(DataError):
        DataManager.load_norm_stats(path)
