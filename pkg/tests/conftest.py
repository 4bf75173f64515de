# -*- coding: utf-8 -*-
"""
テスト共通設定

main.py と同じく src/ をパスに追加し、小さなシーン・モデルのフィクスチャを提供する。
"""

import sys
from pathlib import Path

import numpy as np
import pytest

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))
sys.path.insert(0, str(project_root / "src"))

from core.model import CanopyHeightModel, ModelConfig  # noqa: E402
from core.preprocess import BandSubset, compute_norm_stats  # noqa: E402
from core.raster_io import RasterCube, SENTINEL2_BANDS  # noqa: E402
from core.synthetic import SceneSpec, generate_scene  # noqa: E402
from core.trainer import DataConfig, TrainConfig, TrainSetup  # noqa: E402
from utils.logger import Logger  # noqa: E402

TINY_MODEL = ModelConfig(in_channels=13, trunk_width=8, n_blocks=1, entry_depths=(4, 6))
DESK_MODEL = ModelConfig(in_channels=13, trunk_width=64, n_blocks=4, entry_depths=(16, 32))


def build_cube(height=16, width=16, bands=SENTINEL2_BANDS, date="2020-01-05", seed=0,
               cloud_prob=None, landcover=None, valid=None) -> RasterCube:
    rng = np.random.default_rng(seed)
    shape = (height, width)
    return RasterCube(
        bands=rng.uniform(0.0, 0.5, size=(len(bands),) + shape).astype(np.float32),
        cloud_prob=np.zeros(shape, dtype=np.float32) if cloud_prob is None else cloud_prob,
        landcover=np.ones(shape, dtype=np.uint8) if landcover is None else landcover,
        valid=np.ones(shape, dtype=bool) if valid is None else valid,
        gsd_m=10.0,
        acquisition_date=date,
        band_ids=tuple(bands),
    )


def tiny_setup(**train_overrides) -> TrainSetup:
    values = dict(base_lr=1e-3, batch_size=4, max_iterations=4, val_every=2, seed=7, prefetch_depth=2)
    values.update(train_overrides)
    return TrainSetup(train=TrainConfig(**values),
                      model=ModelConfig(trunk_width=8, n_blocks=1, entry_depths=(4, 6)),
                      data=DataConfig(val_patches=16))


@pytest.fixture
def make_cube():
    return build_cube


@pytest.fixture(scope="session")
def small_spec() -> SceneSpec:
    return SceneSpec(seed=3, height=40, width=40, correlation_length_px=4.0, cloud_coverage_fraction=0.0)


@pytest.fixture(scope="session")
def small_scene(small_spec):
    return generate_scene(small_spec)


@pytest.fixture
def tiny_model(small_scene) -> CanopyHeightModel:
    cubes, _ = small_scene
    stats = compute_norm_stats(cubes, BandSubset.from_name("ALL"))
    return CanopyHeightModel.build(TINY_MODEL, stats)


@pytest.fixture
def setup_factory():
    return tiny_setup


@pytest.fixture
def logger() -> Logger:
    return Logger(level="WARNING")
