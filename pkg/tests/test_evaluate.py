# -*- coding: utf-8 -*-
"""評価指標"""

import math

import numpy as np
import pytest

from core.errors import DataError, ShapeMismatchError
from core.evaluate import (
    ablation_table, binned_mae, confusion_hist, cumulative_distribution, evaluate, evaluate_regions,
    filter_reference, fusion_table, mae, rmse,
)
from core.raster_io import HeightMap


def _pair(seed: int, shape=(30, 30)):
    rng = np.random.default_rng(seed)
    ref_valid = rng.random(shape) > 0.2
    pred_valid = rng.random(shape) > 0.2
    ref = HeightMap(np.where(ref_valid, rng.uniform(0.0, 55.0, shape), np.nan), ref_valid)
    pred = HeightMap(np.where(pred_valid, rng.uniform(-2.0, 50.0, shape), np.nan), pred_valid)
    return pred, ref


def _joint(pred, ref):
    mask = pred.valid & ref.valid
    return pred.heights[mask].astype(np.float64), ref.heights[mask].astype(np.float64)


@pytest.mark.parametrize("seed", range(5))
def test_errors_match_brute_force(seed):
    pred, ref = _pair(seed)
    p, r = _joint(pred, ref)
    assert mae(pred, ref) == pytest.approx(np.abs(p - r).mean(), rel=1e-12)
    assert rmse(pred, ref) == pytest.approx(math.sqrt(((p - r) ** 2).mean()), rel=1e-12)
    assert rmse(pred, ref) >= mae(pred, ref)


def test_identical_maps_have_zero_error():
    _, ref = _pair(1)
    assert mae(ref, ref) == 0.0
    assert rmse(ref, ref) == 0.0


def test_bins_recombine_to_overall_mae():
    pred, ref = _pair(2)
    bins = binned_mae(pred, ref, bin_width=10.0)
    p, r = _joint(pred, ref)
    assert sum(b.count for b in bins) == p.size
    weighted = sum(b.mae * b.count for b in bins) / p.size
    assert weighted == pytest.approx(mae(pred, ref), rel=1e-10)
    for b in bins:
        inside = (r >= b.lower) & (r < b.upper)
        assert b.count == inside.sum()
        assert b.mae == pytest.approx(np.abs(p[inside] - r[inside]).mean(), rel=1e-12)
    assert [b.label for b in bins][:2] == ["0-10", "10-20"]


def test_confusion_counts_every_pixel():
    pred, ref = _pair(3)
    hist = confusion_hist(pred, ref)
    p, r = _joint(pred, ref)
    assert hist.counts.sum() == p.size
    row, col = int(np.floor(r[0])), max(int(np.floor(p[0])), 0)
    assert hist.counts[row, col] >= 1
    triplets = hist.triplets()
    assert triplets["count"].sum() == p.size
    assert (triplets["count"] > 0).all()


def test_cumulative_distribution():
    hmap = HeightMap(np.array([[0.5, 1.5], [2.0, 4.2]]), np.ones((2, 2), dtype=bool))
    curve = cumulative_distribution(hmap)
    assert list(curve.thresholds) == [1.0, 2.0, 3.0, 4.0, 5.0]
    assert list(curve.fractions) == [0.25, 0.5, 0.75, 0.75, 1.0]
    assert curve.at(2.0) == 0.5
    assert curve.at(5.0) == 1.0
    assert curve.at(50.0) == 1.0
    assert np.all(np.diff(curve.fractions) >= 0)


def test_reference_filter_removes_tall_pixels():
    ref = HeightMap(np.array([[10.0, 40.0], [39.9, 55.0]]), np.array([[True, True], [True, False]]))
    filtered, removed = filter_reference(ref, 40.0)
    assert removed == 1
    assert filtered.valid.tolist() == [[True, False], [True, False]]

    pred = HeightMap(np.full((2, 2), 10.0), np.ones((2, 2), dtype=bool))
    report = evaluate(pred, ref, max_ref=40.0)
    assert report.removed_pixels == 1
    assert report.n_pixels == 2
    assert report.mae == pytest.approx((0.0 + 29.9) / 2)
    assert evaluate(pred, ref, max_ref=None).n_pixels == 3


def test_no_common_pixels():
    a = HeightMap(np.ones((2, 2)), np.array([[True, False], [False, False]]))
    b = HeightMap(np.ones((2, 2)), np.array([[False, True], [True, True]]))
    with pytest.raises(DataError):
        mae(a, b)
    with pytest.raises(ShapeMismatchError):
        mae(a, HeightMap(np.ones((3, 3)), np.ones((3, 3), dtype=bool)))


def test_pooled_regions_combine_pixels():
    pairs = {"north": _pair(4), "south": _pair(5, shape=(20, 25))}
    reports = evaluate_regions(pairs, max_ref=40.0)
    assert list(reports) == ["north", "south", "all"]
    pooled = reports["all"]
    assert pooled.n_pixels == reports["north"].n_pixels + reports["south"].n_pixels
    assert pooled.removed_pixels == reports["north"].removed_pixels + reports["south"].removed_pixels
    expected = (reports["north"].mae * reports["north"].n_pixels
                + reports["south"].mae * reports["south"].n_pixels) / pooled.n_pixels
    assert pooled.mae == pytest.approx(expected, rel=1e-10)
    assert reports["south"].name == "south"


def test_report_summary_is_serializable():
    report = evaluate(*_pair(6))
    summary = report.summary()
    assert summary["n_pixels"] == report.n_pixels
    assert summary["max_ref"] == 40.0
    assert all(b["count"] > 0 for b in summary["per_bin"])
    assert list(report.bins_frame().columns) == ["lower", "upper", "mae", "count"]


def test_ablation_table_marks_skipped_variants():
    report = evaluate(*_pair(7))
    table = ablation_table({"ALL": report, "RGB": None}, {"RGB": "バンドが見つかりません"})
    assert list(table["variant"]) == ["ALL", "RGB"]
    assert table.loc[0, "overall"] == pytest.approx(report.mae)
    assert table.loc[0, "status"] == "ok"
    assert table.loc[1, "status"] == "skipped"
    assert math.isnan(table.loc[1, "overall"])
    assert table.loc[1, "reason"] == "バンドが見つかりません"
    assert table.loc[0, "0-10"] == pytest.approx(report.bin_mae(0.0))
    assert "60-70" in table.columns


def test_fusion_table_columns():
    report = evaluate(*_pair(8))
    table = fusion_table({"site": {"median": report}})
    assert table.loc[0, "median_mae"] == pytest.approx(report.mae)
    assert math.isnan(table.loc[0, "mincloud_mae"])
