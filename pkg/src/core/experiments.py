# -*- coding: utf-8 -*-
"""
実験プロトコル

バンド構成・カーネルサイズのアブレーション、撮影日を1つずつ除く時間方向の交差検証、
列方向の領域を1つずつ除く地理的な交差検証、
生成器の既知ルールによる誤差の下限（ノイズフロア）。
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.errors import DataError, MissingBandError
from core.evaluate import DEFAULT_MAX_REF, EvalReport, ablation_table, evaluate
from core.inference import InferenceConfig, PredictionStack, fuse, predict_scene
from core.model import CanopyHeightModel
from core.raster_io import HeightMap, RasterCube
from core.synthetic import SceneSpec, reference_predictor
from core.trainer import TrainSetup, fit, spatial_folds, split_regions
from utils.logger import Logger, get_default_logger

# 構成名 → (バンドサブセット, カーネル)
VARIANTS: Dict[str, Tuple[str, str]] = {
    "ALL": ("ALL", "3x3"),
    "RGB": ("RGB", "3x3"),
    "N": ("N", "3x3"),
    "RGBN": ("RGBN", "3x3"),
    "woRGBN": ("woRGBN", "3x3"),
    "ALL_1x1": ("ALL", "1x1"),
}


@dataclass
class VariantResult:
    """1構成の学習・評価結果"""
    name: str
    reports: Dict[str, EvalReport] = field(default_factory=dict)
    best_val_loss: Optional[float] = None
    reason: str = ""
    model: Optional[CanopyHeightModel] = None

    @property
    def skipped(self) -> bool:
        return not self.reports

    def report(self, method: str = "median") -> Optional[EvalReport]:
        return self.reports.get(method)


def inference_config_for(model: CanopyHeightModel, base: Optional[InferenceConfig] = None) -> InferenceConfig:
    """タイル推論が全画像推論と一致する重なり幅に広げた設定"""
    base = base or InferenceConfig()
    overlap = max(base.overlap, 2 * model.config.receptive_radius)
    tile_size = max(base.tile_size, 2 * overlap + 1)
    return replace(base, overlap=overlap, tile_size=tile_size)


def evaluate_model(model: CanopyHeightModel, cubes: Sequence[RasterCube], reference: HeightMap,
                   region: np.ndarray, methods: Sequence[str] = ("median", "mincloud"),
                   max_ref: Optional[float] = DEFAULT_MAX_REF,
                   config: Optional[InferenceConfig] = None,
                   logger: Optional[Logger] = None) -> Dict[str, EvalReport]:
    """全撮影日を推論して融合し、region 内で評価する"""
    config = inference_config_for(model, config)
    predictions = [predict_scene(model, cube, config=config, logger=logger) for cube in cubes]
    stack = PredictionStack.from_predictions(predictions, cubes)
    target = reference.with_valid(region)
    return {method: evaluate(fuse(stack, method), target, max_ref, name=method) for method in methods}


def run_variant(name: str, cubes: Sequence[RasterCube], reference: HeightMap, setup: TrainSetup,
                out_dir: Optional[Path] = None, max_ref: Optional[float] = DEFAULT_MAX_REF,
                logger: Optional[Logger] = None) -> VariantResult:
    """
    1構成を学習して test 領域で評価する

    バンドが足りない構成は例外にせず、理由付きでスキップする。
    """
    logger = logger or get_default_logger()
    if name not in VARIANTS:
        raise DataError(f"未知の構成です: {name} (候補: {', '.join(VARIANTS)})")
    band_subset, kernel_mode = VARIANTS[name]
    variant_setup = setup.with_variant(band_subset, kernel_mode)
    try:
        result, data = fit(cubes, reference, variant_setup,
                           out_dir=Path(out_dir) / name if out_dir else None, logger=logger.child(name))
    except MissingBandError as e:
        logger.log_warning(f"構成 {name} をスキップします: {e}")
        return VariantResult(name, reason=str(e))
    reports = evaluate_model(result.best_model, cubes, reference, data.regions["test"],
                             max_ref=max_ref, logger=logger)
    logger.log_metrics(f"構成評価 {name}", mae_m=reports["median"].mae, best_val_loss=result.best_val_loss)
    return VariantResult(name, reports, result.best_val_loss, model=result.best_model)


def run_ablation(variants: Sequence[str], cubes: Sequence[RasterCube], reference: HeightMap,
                 setup: TrainSetup, out_dir: Optional[Path] = None,
                 max_ref: Optional[float] = DEFAULT_MAX_REF,
                 logger: Optional[Logger] = None) -> Tuple[pd.DataFrame, List[VariantResult]]:
    """
    構成ごとに同じシード・データで学習・評価し、全体 MAE と区間別 MAE の表を作る

    Returns:
        Tuple[pd.DataFrame, List[VariantResult]]: 表と構成ごとの結果
    """
    results = [run_variant(v, cubes, reference, setup, out_dir, max_ref, logger) for v in variants]
    table = ablation_table({r.name: r.report("median") for r in results},
                           {r.name: r.reason for r in results})
    return table, results


@dataclass
class CrossValResult:
    """交差検証結果（フォールドごとの表と MAE の平均・標本標準偏差）"""
    folds: pd.DataFrame
    mean_mae: float
    std_mae: float


def temporal_cross_validation(cubes: Sequence[RasterCube], reference: HeightMap, setup: TrainSetup,
                              out_dir: Optional[Path] = None,
                              max_ref: Optional[float] = DEFAULT_MAX_REF,
                              logger: Optional[Logger] = None) -> CrossValResult:
    """
    撮影日を1つずつ除いて学習し、除いた日の予測を test 領域で評価する

    Raises:
        DataError: 撮影日が2未満
    """
    logger = logger or get_default_logger()
    if len(cubes) < 2:
        raise DataError("時間方向の交差検証には2撮影日以上が必要です")
    rows = []
    for held_out, cube in enumerate(cubes):
        train_cubes = [c for i, c in enumerate(cubes) if i != held_out]
        fold_dir = Path(out_dir) / f"fold_{cube.acquisition_date}" if out_dir else None
        result, data = fit(train_cubes, reference, setup, out_dir=fold_dir,
                           logger=logger.child(f"fold{held_out}"))
        config = inference_config_for(result.best_model)
        prediction = predict_scene(result.best_model, cube, config=config, logger=logger)
        report = evaluate(prediction, reference.with_valid(data.regions["test"]), max_ref)
        rows.append({"held_out_date": cube.acquisition_date, "mae": report.mae, "rmse": report.rmse,
                     "n_pixels": report.n_pixels})
        logger.log_metrics(f"交差検証 {cube.acquisition_date}", mae_m=report.mae, rmse_m=report.rmse)
    folds = pd.DataFrame(rows, columns=["held_out_date", "mae", "rmse", "n_pixels"])
    return CrossValResult(folds, float(folds["mae"].mean()), float(folds["mae"].std(ddof=1)))


def geographic_cross_validation(cubes: Sequence[RasterCube], reference: HeightMap, setup: TrainSetup,
                                n_folds: int = 3, out_dir: Optional[Path] = None,
                                max_ref: Optional[float] = DEFAULT_MAX_REF,
                                logger: Optional[Logger] = None) -> CrossValResult:
    """
    列方向の領域を1つずつ除いて学習し、除いた領域を全撮影日の中央値融合で評価する

    除く領域の左右には パッチ半径 + 受容野半径 の緩衝帯を設け、学習パッチが
    test 領域の画素を入力にも正解にも含まないようにする。

    Args:
        cubes: 撮影日ごとのキューブ
        reference: 参照樹高
        setup: 学習設定一式
        n_folds: 領域の数
        out_dir: フォールドごとの出力先
        max_ref: 参照の上限
        logger: ロガー

    Raises:
        ConfigError: 領域が分けられない（幅が足りない）
    """
    logger = logger or get_default_logger()
    guard = setup.train.patch_size // 2 + setup.resolved_model().receptive_radius
    rows = []
    for index, regions in enumerate(spatial_folds(reference.shape, n_folds, guard)):
        columns = np.nonzero(regions["test"].any(axis=0))[0]
        label = f"{columns[0]}-{columns[-1]}"
        fold_dir = Path(out_dir) / f"fold_cols_{label}" if out_dir else None
        result, _ = fit(cubes, reference, setup, out_dir=fold_dir, logger=logger.child(f"region{index}"),
                        regions=regions)
        report = evaluate_model(result.best_model, cubes, reference, regions["test"], ("median",),
                                max_ref, logger=logger)["median"]
        rows.append({"held_out_columns": label, "mae": report.mae, "rmse": report.rmse,
                     "n_pixels": report.n_pixels})
        logger.log_metrics(f"地理的交差検証 列 {label}", mae_m=report.mae, rmse_m=report.rmse)
    folds = pd.DataFrame(rows, columns=["held_out_columns", "mae", "rmse", "n_pixels"])
    return CrossValResult(folds, float(folds["mae"].mean()), float(folds["mae"].std(ddof=1)))


def noise_floor(cubes: Sequence[RasterCube], reference: HeightMap, spec: SceneSpec,
                region: Optional[np.ndarray] = None, max_ref: Optional[float] = None) -> float:
    """
    生成ルールを既知とした参照予測器の MAE（晴天の撮影日をまとめて逆算）

    Args:
        cubes: 撮影日ごとのキューブ
        reference: 参照樹高
        spec: シーンを生成した仕様
        region: 評価領域（None なら既定の分割の test 領域）
        max_ref: 参照の上限
    """
    if region is None:
        region = split_regions(reference.shape)["test"]
    return evaluate(reference_predictor(cubes, spec), reference.with_valid(region), max_ref).mae
