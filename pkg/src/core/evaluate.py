# -*- coding: utf-8 -*-
"""
評価指標

MAE / RMSE / 10 m 区間ごとの MAE / 1 m ビンの2次元ヒストグラム / 累積分布 / 参照の上限フィルタ。
すべて予測と参照の両方で有効な画素だけを使い、集計は float64。
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Any

import numpy as np
import pandas as pd

from core.errors import DataError, ShapeMismatchError
from core.raster_io import HeightMap

DEFAULT_MAX_REF = 40.0
ABLATION_BINS = tuple((lo, lo + 10) for lo in range(0, 70, 10))


@dataclass(frozen=True)
class BinStat:
    """参照樹高の区間 [lower, upper) の誤差"""
    lower: float
    upper: float
    mae: float
    count: int

    @property
    def label(self) -> str:
        return f"{self.lower:g}-{self.upper:g}"


@dataclass(frozen=True, eq=False)
class ConfusionHist:
    """参照（行）× 予測（列）の2次元ヒストグラム"""
    counts: np.ndarray
    bin_width: float

    def triplets(self) -> pd.DataFrame:
        """非ゼロのセルを (row, col, count) で返す"""
        rows, cols = np.nonzero(self.counts)
        return pd.DataFrame({"row": rows, "col": cols, "count": self.counts[rows, cols]})


@dataclass(frozen=True, eq=False)
class CumulativeCurve:
    """しきい値未満の面積割合"""
    thresholds: np.ndarray
    fractions: np.ndarray

    def at(self, threshold: float) -> float:
        """threshold 以上で最初の刻みの割合（最後の刻みを超えたら最後の値=1）"""
        index = int(np.searchsorted(self.thresholds, threshold))
        return float(self.fractions[min(index, len(self.fractions) - 1)])

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"height_m": self.thresholds, "fraction_below": self.fractions})


@dataclass
class EvalReport:
    """評価結果"""
    mae: float
    rmse: float
    n_pixels: int
    per_bin: List[BinStat]
    confusion: ConfusionHist
    cumulative: CumulativeCurve
    removed_pixels: int = 0
    max_ref: Optional[float] = None
    name: str = ""

    def summary(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "mae": self.mae,
            "rmse": self.rmse,
            "n_pixels": self.n_pixels,
            "removed_pixels": self.removed_pixels,
            "max_ref": self.max_ref,
            "per_bin": [{"bin": b.label, "mae": b.mae, "count": b.count} for b in self.per_bin],
        }

    def bins_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"lower": b.lower, "upper": b.upper, "mae": b.mae, "count": b.count}
                             for b in self.per_bin], columns=["lower", "upper", "mae", "count"])

    def bin_mae(self, lower: float) -> Optional[float]:
        for b in self.per_bin:
            if b.lower == lower:
                return b.mae
        return None


# ---------------------------------------------------------------------------
# 画素の取り出し
# ---------------------------------------------------------------------------

def joint_values(pred: HeightMap, ref: HeightMap) -> Tuple[np.ndarray, np.ndarray]:
    """
    両方で有効な画素の (予測, 参照) を float64 で返す

    Raises:
        ShapeMismatchError: 形状不一致
        DataError: 共通の有効画素がない
    """
    if pred.shape != ref.shape:
        raise ShapeMismatchError(f"予測 {pred.shape} と参照 {ref.shape} の形状が一致しません")
    mask = pred.valid & ref.valid
    if not mask.any():
        raise DataError("予測と参照に共通の有効画素がありません")
    return pred.heights[mask].astype(np.float64), ref.heights[mask].astype(np.float64)


def _mae(p: np.ndarray, r: np.ndarray) -> float:
    return float(np.mean(np.abs(p - r)))


def _rmse(p: np.ndarray, r: np.ndarray) -> float:
    d = p - r
    return math.sqrt(float(np.dot(d, d)) / d.size)


def _bin_index(values: np.ndarray, width: float) -> np.ndarray:
    return np.maximum(np.floor(values / width), 0).astype(np.int64)


def _binned(p: np.ndarray, r: np.ndarray, width: float) -> List[BinStat]:
    if not width > 0:
        raise ValueError(f"bin_width は正: {width}")
    index = _bin_index(r, width)
    abs_err = np.abs(p - r)
    sums = np.bincount(index, weights=abs_err)
    counts = np.bincount(index)
    return [BinStat(k * width, (k + 1) * width, float(sums[k] / counts[k]), int(counts[k]))
            for k in np.nonzero(counts)[0]]


def _confusion(p: np.ndarray, r: np.ndarray, width: float) -> ConfusionHist:
    rows = _bin_index(r, width)
    cols = _bin_index(p, width)
    size = int(max(rows.max(), cols.max())) + 1
    counts = np.bincount(rows * size + cols, minlength=size * size).reshape(size, size)
    return ConfusionHist(counts.astype(np.int64), width)


def _cumulative(values: np.ndarray, step: float) -> CumulativeCurve:
    if not step > 0:
        raise ValueError(f"step は正: {step}")
    if values.size == 0:
        raise DataError("有効画素がありません")
    top = max(float(values.max()), 0.0)
    n_steps = int(math.floor(top / step)) + 1
    thresholds = step * np.arange(1, n_steps + 1, dtype=np.float64)
    ordered = np.sort(values)
    fractions = np.searchsorted(ordered, thresholds, side="left") / values.size
    return CumulativeCurve(thresholds, fractions.astype(np.float64))


# ---------------------------------------------------------------------------
# 公開 API
# ---------------------------------------------------------------------------

def mae(pred: HeightMap, ref: HeightMap) -> float:
    """平均絶対誤差 [m]"""
    return _mae(*joint_values(pred, ref))


def rmse(pred: HeightMap, ref: HeightMap) -> float:
    """二乗平均平方根誤差 [m]"""
    return _rmse(*joint_values(pred, ref))


def binned_mae(pred: HeightMap, ref: HeightMap, bin_width: float = 10.0) -> List[BinStat]:
    """
    参照樹高の区間 [k·w, (k+1)·w) ごとの MAE（空の区間は含めない）

    負の参照は最初の区間に入れる。
    """
    return _binned(*joint_values(pred, ref), bin_width)


def filter_reference(ref: HeightMap, max_height: float = DEFAULT_MAX_REF) -> Tuple[HeightMap, int]:
    """
    max_height 以上の参照画素を無効にする

    Returns:
        Tuple[HeightMap, int]: フィルタ後の参照と除外した画素数
    """
    too_high = ref.valid & (np.where(ref.valid, ref.heights, -np.inf) >= max_height)
    return ref.with_valid(~too_high), int(np.count_nonzero(too_high))


def confusion_hist(pred: HeightMap, ref: HeightMap, bin_width: float = 1.0) -> ConfusionHist:
    """1 m ビンの2次元ヒストグラム（負の予測は最初のビンに入れる）"""
    p, r = joint_values(pred, ref)
    return _confusion(p, r, bin_width)


def cumulative_distribution(hmap: HeightMap, step: float = 1.0) -> CumulativeCurve:
    """
    樹高の累積分布

    しきい値 step, 2·step, … について、樹高がしきい値未満の有効画素の割合。
    最後のしきい値は最大値を超えるので割合は1になる。
    """
    return _cumulative(hmap.heights[hmap.valid].astype(np.float64), step)


def report_from_values(p: np.ndarray, r: np.ndarray, removed: int = 0, max_ref: Optional[float] = None,
                       bin_width: float = 10.0, hist_bin: float = 1.0, step: float = 1.0,
                       name: str = "") -> EvalReport:
    """画素値の配列から評価結果を作る"""
    if p.size == 0:
        raise DataError("評価対象の画素がありません")
    return EvalReport(
        mae=_mae(p, r),
        rmse=_rmse(p, r),
        n_pixels=int(p.size),
        per_bin=_binned(p, r, bin_width),
        confusion=_confusion(p, r, hist_bin),
        cumulative=_cumulative(p, step),
        removed_pixels=removed,
        max_ref=max_ref,
        name=name,
    )


def evaluate(pred: HeightMap, ref: HeightMap, max_ref: Optional[float] = DEFAULT_MAX_REF,
             bin_width: float = 10.0, hist_bin: float = 1.0, step: float = 1.0, name: str = "") -> EvalReport:
    """
    参照フィルタを適用してからすべての指標を計算する

    Args:
        pred: 予測
        ref: 参照
        max_ref: 参照の上限（None ならフィルタしない）
        bin_width: 区間 MAE の幅
        hist_bin: 2次元ヒストグラムのビン幅
        step: 累積分布の刻み
        name: 領域名
    """
    removed = 0
    if max_ref is not None:
        ref, removed = filter_reference(ref, max_ref)
    p, r = joint_values(pred, ref)
    return report_from_values(p, r, removed, max_ref, bin_width, hist_bin, step, name)


def evaluate_regions(pairs: Mapping[str, Tuple[HeightMap, HeightMap]],
                     max_ref: Optional[float] = DEFAULT_MAX_REF,
                     pooled_name: str = "all", **kwargs) -> Dict[str, EvalReport]:
    """
    領域ごとの評価と、全領域の画素をまとめた評価（pooled_name）

    Returns:
        Dict[str, EvalReport]: 領域名 → 評価。最後に pooled_name が入る
    """
    if not pairs:
        raise DataError("評価する領域がありません")
    reports: Dict[str, EvalReport] = {}
    pooled_p, pooled_r = [], []
    removed_total = 0
    for name, (pred, ref) in pairs.items():
        removed = 0
        if max_ref is not None:
            ref, removed = filter_reference(ref, max_ref)
        p, r = joint_values(pred, ref)
        reports[name] = report_from_values(p, r, removed, max_ref, name=name, **kwargs)
        pooled_p.append(p)
        pooled_r.append(r)
        removed_total += removed
    reports[pooled_name] = report_from_values(np.concatenate(pooled_p), np.concatenate(pooled_r),
                                              removed_total, max_ref, name=pooled_name, **kwargs)
    return reports


# ---------------------------------------------------------------------------
# 表
# ---------------------------------------------------------------------------

def fusion_table(results: Mapping[str, Mapping[str, EvalReport]]) -> pd.DataFrame:
    """
    融合方式ごとの MAE / RMSE 表

    Args:
        results: 領域名 → {"mincloud": EvalReport, "median": EvalReport}
    """
    rows = []
    for region, by_method in results.items():
        row: Dict[str, Any] = {"region": region}
        for method in ("mincloud", "median"):
            report = by_method.get(method)
            row[f"{method}_mae"] = report.mae if report else np.nan
            row[f"{method}_rmse"] = report.rmse if report else np.nan
        rows.append(row)
    return pd.DataFrame(rows, columns=["region", "mincloud_mae", "mincloud_rmse", "median_mae", "median_rmse"])


def ablation_table(results: Mapping[str, Optional[EvalReport]],
                   reasons: Optional[Mapping[str, str]] = None,
                   bins: Sequence[Tuple[int, int]] = ABLATION_BINS) -> pd.DataFrame:
    """
    バンド構成ごとの全体 MAE と 10 m 区間ごとの MAE の表

    スキップされた構成（値が None）は status と理由を記録する。
    """
    reasons = dict(reasons or {})
    columns = ["variant", "overall"] + [f"{lo}-{hi}" for lo, hi in bins] + ["status", "reason"]
    rows = []
    for variant, report in results.items():
        row: Dict[str, Any] = {"variant": variant}
        if report is None:
            row.update({"overall": np.nan, "status": "skipped", "reason": reasons.get(variant, "")})
            row.update({f"{lo}-{hi}": np.nan for lo, hi in bins})
        else:
            row.update({"overall": report.mae, "status": "ok", "reason": ""})
            for lo, hi in bins:
                value = report.bin_mae(float(lo))
                row[f"{lo}-{hi}"] = np.nan if value is None else value
        rows.append(row)
    return pd.DataFrame(rows, columns=columns)
