# -*- coding: utf-8 -*-
"""コマンドライン（終了コードと成果物）"""

import json

import numpy as np
import pandas as pd
import pytest
import yaml

from app import CanopyHeightApp
from cli.manifest import RunManifest
from core.data_manager import DataManager
from core.inference import PredictionStack, fuse_median
from core.raster_io import read_heights
from utils.file_utils import FileUtils

SCENE = {"scene": {"seed": 3, "height": 40, "width": 40, "correlation_length_px": 4.0,
                   "cloud_coverage_fraction": 0.0, "n_dates": 2}}
TRAIN = {
    "train": {"base_lr": 1.0e-3, "batch_size": 4, "max_iterations": 2, "val_every": 1, "seed": 7,
              "prefetch_depth": 2},
    "model": {"trunk_width": 8, "n_blocks": 1, "entry_depths": [4, 6]},
    "data": {"val_patches": 16},
}


def _write_yaml(path, data):
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


def _run(app_dir, *argv):
    return CanopyHeightApp(app_dir=app_dir).run(["--log-level", "WARNING", *map(str, argv)])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = _write_yaml(root / "scene.yaml", SCENE)
    train = _write_yaml(root / "train.yaml", TRAIN)
    assert _run(root, "synthesize", "--spec", spec, "--out", root / "scene") == 0
    assert _run(root, "train", "--config", train, "--data", root / "scene", "--out", root / "run") == 0
    return root


def test_synthesize_writes_scene_and_manifest(workspace):
    scene = DataManager(workspace / "scene")
    assert len(scene.get_all_dates()) == 2
    info = scene.load_info()
    assert info["scene_spec"]["height"] == 40
    assert info["noise_floor_mae"] > 0.0
    manifest = RunManifest.read(workspace / "scene")
    assert manifest.command == "synthesize"
    assert manifest.seed == 3
    assert str(scene.reference_path) in manifest.outputs


def test_synthesize_is_deterministic(workspace, tmp_path):
    spec = workspace / "scene.yaml"
    assert _run(tmp_path, "synthesize", "--spec", spec, "--out", tmp_path / "again") == 0
    for name in ["reference.rcube", "scene.json"] + [f"cubes/{d}.rcube" for d in
                                                      DataManager(workspace / "scene").get_all_dates()]:
        assert FileUtils.sha256(workspace / "scene" / name) == FileUtils.sha256(tmp_path / "again" / name)


def test_seed_override_changes_scene(workspace, tmp_path):
    assert _run(tmp_path, "synthesize", "--spec", workspace / "scene.yaml", "--out", tmp_path / "s9",
                "--seed", 9) == 0
    assert FileUtils.sha256(tmp_path / "s9" / "reference.rcube") != \
        FileUtils.sha256(workspace / "scene" / "reference.rcube")


def test_malformed_spec_exits_with_config_code(tmp_path):
    spec = _write_yaml(tmp_path / "bad.yaml", {"scene": {"height": -4}})
    assert _run(tmp_path, "synthesize", "--spec", spec, "--out", tmp_path / "out") == 2
    assert not (tmp_path / "out").exists()
    unknown = _write_yaml(tmp_path / "unknown.yaml", {"scene": {"colour": "green"}})
    assert _run(tmp_path, "synthesize", "--spec", unknown, "--out", tmp_path / "out") == 2


def test_missing_scene_exits_with_data_code(tmp_path):
    assert _run(tmp_path, "stats", "--data", tmp_path / "nowhere", "--out", tmp_path / "o") == 4


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("best.chkp", "last.chkp", "loss_curve.csv", "manifest.json"):
        assert (run / name).exists()
    curve = pd.read_csv(run / "loss_curve.csv")
    assert list(curve["iteration"]) == [1, 2]
    results = RunManifest.read(run).results
    assert results["iteration"] == 2
    assert results["best_val_loss"] == pytest.approx(curve["val_loss"].min())
    assert results["param_count"] > 0


def test_train_zero_iterations(workspace, tmp_path):
    assert _run(tmp_path, "train", "--config", workspace / "train.yaml", "--data", workspace / "scene",
                "--out", tmp_path / "zero", "--max-iterations", 0) == 0
    results = RunManifest.read(tmp_path / "zero").results
    assert results["best_val_loss"] is None
    assert results["iteration"] == 0


def test_train_resume_continues_counter(workspace, tmp_path):
    assert _run(tmp_path, "train", "--config", workspace / "train.yaml", "--data", workspace / "scene",
                "--out", tmp_path / "more", "--resume", workspace / "run" / "last.chkp",
                "--max-iterations", 3) == 0
    curve = pd.read_csv(tmp_path / "more" / "loss_curve.csv")
    assert list(curve["iteration"]) == [1, 2, 3]


def test_stats_command(workspace, tmp_path):
    assert _run(tmp_path, "stats", "--data", workspace / "scene", "--out", tmp_path / "stats",
                "--bands", "RGBN") == 0
    stats = json.loads((tmp_path / "stats" / "norm_stats.json").read_text(encoding="utf-8"))
    assert stats["band_ids"] == ["B02", "B03", "B04", "B08"]
    assert _run(tmp_path, "stats", "--data", workspace / "scene", "--out", tmp_path / "x",
                "--bands", "SWIR") == 4


def test_predict_with_band_mismatch_exits_with_data_code(workspace, tmp_path):
    code = _run(tmp_path, "predict", "--checkpoint", workspace / "run" / "best.chkp",
                "--cubes", workspace / "scene", "--out", tmp_path / "pred", "--bands", "RGB")
    assert code == 4


def test_predict_and_fuse(workspace, tmp_path):
    scene = DataManager(workspace / "scene")
    assert _run(tmp_path, "predict", "--checkpoint", workspace / "run" / "best.chkp",
                "--cubes", workspace / "scene", "--out", tmp_path / "pred", "--fuse", "median",
                "--pgm") == 0
    dates = scene.get_all_dates()
    preds = [tmp_path / "pred" / f"pred_{d}.rcube" for d in dates]
    hmaps = [read_heights(p) for p in preds]
    expected = fuse_median(PredictionStack.from_predictions(hmaps, scene.load_cubes()))
    assert read_heights(tmp_path / "pred" / "fused_median.rcube").equals(expected)
    assert (tmp_path / "pred" / "fused_median.pgm").exists()

    assert _run(tmp_path, "fuse", "--preds", *preds, "--cubes", workspace / "scene",
                "--out", tmp_path / "fused", "--fuse", "median") == 0
    assert read_heights(tmp_path / "fused" / "fused_median.rcube").equals(expected)


def test_evaluate_identical_maps(workspace, tmp_path):
    ref = workspace / "scene" / "reference.rcube"
    assert _run(tmp_path, "evaluate", "--pred", ref, "--ref", ref, "--out", tmp_path / "eval") == 0
    results = RunManifest.read(tmp_path / "eval").results
    assert results["mae"] == 0.0
    reference = read_heights(ref)
    expected_removed = int(np.count_nonzero(reference.valid & (np.nan_to_num(reference.heights) >= 40.0)))
    assert results["removed_pixels"] == expected_removed
    for name in ("report.json", "bins.csv", "confusion.csv", "cumulative.csv"):
        assert (tmp_path / "eval" / name).exists()


def test_evaluate_two_regions(workspace, tmp_path):
    ref = workspace / "scene" / "reference.rcube"
    assert _run(tmp_path, "evaluate", "--pred", ref, ref, "--ref", ref, ref, "--out", tmp_path / "eval",
                "--no-filter", "--xlsx") == 0
    summary = json.loads((tmp_path / "eval" / "report.json").read_text(encoding="utf-8"))
    assert set(summary["regions"]) == {"reference", "reference_1", "all"}
    assert (tmp_path / "eval" / "reference_report.json").exists()
    assert (tmp_path / "eval" / "report.xlsx").exists()
    assert _run(tmp_path, "evaluate", "--pred", ref, "--ref", ref, ref, "--out", tmp_path / "e2") == 2


def test_params_command(tmp_path, workspace):
    assert _run(tmp_path, "params", "--config", workspace / "train.yaml", "--out", tmp_path / "params") == 0
    params = json.loads((tmp_path / "params" / "params.json").read_text(encoding="utf-8"))
    assert params["full_size"]["total"] == 19_719_309
    assert params["configured"]["total"] < params["full_size"]["total"]


def test_default_config_files_are_created(tmp_path):
    assert _run(tmp_path, "params") == 0
    assert (tmp_path / "config" / "train_config.yaml").exists()
    assert (tmp_path / "data" / "logs" / "canopy.log").exists()


def test_predict_seam_check_reports_exact_tiling(workspace, tmp_path):
    assert _run(tmp_path, "predict", "--checkpoint", workspace / "run" / "best.chkp",
                "--cubes", workspace / "scene", "--out", tmp_path / "pred", "--tile-size", 16,
                "--overlap", 8, "--seam-check") == 0
    seams = pd.read_csv(tmp_path / "pred" / "seam.csv")
    assert len(seams) == 2
    assert (seams["overlap"] == 8).all() and (seams["tile_size"] == 16).all()
    results = RunManifest.read(tmp_path / "pred").results
    assert results["seam_exact_expected"] is True
    assert results["seam_max_rel_error"] < 1e-5


def test_fuse_with_reference_compares_methods_and_dates(workspace, tmp_path):
    assert _run(tmp_path, "predict", "--checkpoint", workspace / "run" / "best.chkp",
                "--cubes", workspace / "scene", "--out", tmp_path / "pred") == 0
    preds = sorted((tmp_path / "pred").glob("pred_*.rcube"))
    assert _run(tmp_path, "fuse", "--preds", *preds, "--cubes", workspace / "scene",
                "--out", tmp_path / "fused", "--ref", workspace / "scene" / "reference.rcube",
                "--part", "test") == 0
    fusion = pd.read_csv(tmp_path / "fused" / "fusion.csv")
    assert list(fusion["region"]) == ["test"]
    assert {"mincloud_mae", "median_mae"} <= set(fusion.columns)
    per_date = pd.read_csv(tmp_path / "fused" / "per_date.csv")
    assert len(per_date) == 2
    results = RunManifest.read(tmp_path / "fused").results
    assert results["fusion_mae"]["median"] == pytest.approx(fusion["median_mae"][0])
    assert results["per_date_mae_std"] == pytest.approx(per_date["mae"].std(ddof=1))


def test_geographic_crossval_command(workspace, tmp_path):
    assert _run(tmp_path, "crossval", "--config", workspace / "train.yaml", "--data", workspace / "scene",
                "--out", tmp_path / "cv", "--mode", "geographic", "--folds", 2) == 0
    folds = pd.read_csv(tmp_path / "cv" / "crossval.csv")
    assert list(folds["held_out_columns"]) == ["0-19", "20-39"]
    summary = json.loads((tmp_path / "cv" / "crossval.json").read_text(encoding="utf-8"))
    assert summary["mode"] == "geographic" and summary["n_folds"] == 2
    assert summary["mean_mae"] == pytest.approx(folds["mae"].mean())
