# -*- coding: utf-8 -*-
"""
推論

シーン全体をタイルに分けて全層畳み込みモデルを適用し、重なり部分は
「タイル内でより深い（タイル内部の辺から遠い）方」を採用して貼り合わせる。
撮影日ごとの予測は中央値または最小雲確率で融合する。
"""

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.errors import ConfigError, DataError, NumericError, ShapeMismatchError
from core.evaluate import mae
from core.model import CanopyHeightModel
from core.preprocess import CLOUD_THRESHOLD, BandSubset, NormStats, cloud_mask, prepare_input
from core.raster_io import HeightMap, LandCover, RasterCube
from utils.date_utils import DateUtils
from utils.logger import Logger, get_default_logger

THREADS_ENV = "CANOPY_THREADS"


@dataclass(frozen=True)
class InferenceConfig:
    """推論の設定"""
    tile_size: int = 128
    overlap: int = 8
    cloud_threshold: float = CLOUD_THRESHOLD
    mask_water: bool = True
    mask_snow: bool = False
    workers: int = 0

    def validate(self):
        if self.tile_size < 1:
            raise ConfigError(f"tile_size は正: {self.tile_size}")
        if not 0 <= self.overlap < self.tile_size:
            raise ConfigError(f"overlap は 0 以上 tile_size 未満: {self.overlap}")
        if self.workers < 0:
            raise ConfigError(f"workers は0以上: {self.workers}")

    def resolved_workers(self) -> int:
        if self.workers:
            return self.workers
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            return max(1, int(raw))
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV} は整数で指定してください: {raw!r}") from e


@dataclass(frozen=True)
class Tile:
    """タイル [row0, row1) × [col0, col1)"""
    index: int
    row0: int
    row1: int
    col0: int
    col1: int

    @property
    def rows(self) -> slice:
        return slice(self.row0, self.row1)

    @property
    def cols(self) -> slice:
        return slice(self.col0, self.col1)

    def describe(self) -> str:
        return f"#{self.index} rows {self.row0}:{self.row1} cols {self.col0}:{self.col1}"


def _axis_spans(length: int, tile_size: int, overlap: int) -> List[Tuple[int, int]]:
    spans = []
    start = 0
    while True:
        end = min(start + tile_size, length)
        spans.append((start, end))
        if end == length:
            return spans
        start = end - overlap


@dataclass(frozen=True, eq=False)
class TileGrid:
    """画像を覆うタイルの集合と、各画素をどのタイルから取るかの対応"""
    height: int
    width: int
    tile_size: int
    overlap: int
    tiles: Tuple[Tile, ...]
    owner: np.ndarray = field(repr=False)

    @classmethod
    def for_shape(cls, height: int, width: int, tile_size: int = 128, overlap: int = 8) -> "TileGrid":
        """
        H×W を覆うタイル格子を作る

        隣接タイルはちょうど overlap 画素重なり、最後のタイルは短くなることがある。
        """
        if height < 1 or width < 1:
            raise DataError(f"画像サイズが不正です: {height}×{width}")
        if tile_size < 1 or not 0 <= overlap < tile_size:
            raise ConfigError(f"tile_size={tile_size}, overlap={overlap} は不正です")
        tiles = []
        for r0, r1 in _axis_spans(height, tile_size, overlap):
            for c0, c1 in _axis_spans(width, tile_size, overlap):
                tiles.append(Tile(len(tiles), r0, r1, c0, c1))
        owner = cls._assign_owner(height, width, tiles)
        return cls(height, width, tile_size, overlap, tuple(tiles), owner)

    @classmethod
    def whole(cls, height: int, width: int) -> "TileGrid":
        """画像全体を1タイルで覆う格子"""
        return cls.for_shape(height, width, tile_size=max(height, width), overlap=0)

    @staticmethod
    def tile_depth(tile: Tile, height: int, width: int) -> np.ndarray:
        """タイル内各画素から、画像端でないタイル辺までの距離（画素数）"""
        rows = np.arange(tile.row0, tile.row1)
        cols = np.arange(tile.col0, tile.col1)
        inf = np.iinfo(np.int64).max
        top = rows - tile.row0 if tile.row0 > 0 else np.full(rows.shape, inf)
        bottom = tile.row1 - 1 - rows if tile.row1 < height else np.full(rows.shape, inf)
        left = cols - tile.col0 if tile.col0 > 0 else np.full(cols.shape, inf)
        right = tile.col1 - 1 - cols if tile.col1 < width else np.full(cols.shape, inf)
        row_depth = np.minimum(top, bottom)
        col_depth = np.minimum(left, right)
        return np.minimum(row_depth[:, np.newaxis], col_depth[np.newaxis, :])

    @classmethod
    def _assign_owner(cls, height: int, width: int, tiles: Sequence[Tile]) -> np.ndarray:
        owner = np.full((height, width), -1, dtype=np.int64)
        best = np.full((height, width), -1, dtype=np.int64)
        for tile in tiles:
            depth = cls.tile_depth(tile, height, width)
            region_best = best[tile.rows, tile.cols]
            better = depth > region_best
            region_best[better] = depth[better]
            owner[tile.rows, tile.cols][better] = tile.index
        return owner

    def exact_for_radius(self, radius: int) -> bool:
        """受容野半径 radius のモデルで全画像推論と一致するか"""
        return len(self.tiles) == 1 or self.overlap >= 2 * radius

    def compose(self, outputs: Sequence[np.ndarray]) -> np.ndarray:
        """タイル出力（各 h×w）を担当画素だけ貼り合わせる"""
        result = np.zeros((self.height, self.width), dtype=np.float32)
        for tile, out in zip(self.tiles, outputs):
            mine = self.owner[tile.rows, tile.cols] == tile.index
            result[tile.rows, tile.cols][mine] = out[mine]
        return result


def prediction_mask(cube: RasterCube, config: InferenceConfig) -> np.ndarray:
    """予測を有効とする画素（雲・水・設定により雪を除外）"""
    valid = cube.valid & ~cloud_mask(cube.cloud_prob, config.cloud_threshold)
    if config.mask_water:
        valid &= cube.landcover != LandCover.WATER
    if config.mask_snow:
        valid &= cube.landcover != LandCover.SNOW
    return valid


def _input_for(model: CanopyHeightModel, cube: RasterCube, stats: Optional[NormStats]) -> np.ndarray:
    stats = stats or model.norm_stats
    if stats is None:
        raise DataError("正規化統計量がありません（モデルにも引数にも含まれていません）")
    if model.config.in_channels != len(stats.band_ids):
        raise ShapeMismatchError(f"モデルの入力チャンネル {model.config.in_channels} と統計量のバンド数 "
                                 f"{len(stats.band_ids)} が一致しません")
    return prepare_input(cube, BandSubset.from_bands(stats.band_ids), stats)


def predict_array(model: CanopyHeightModel, x: np.ndarray, grid: TileGrid, workers: int = 1) -> np.ndarray:
    """
    正規化済み入力 1×C×H×W をタイルごとに推論して H×W を返す

    Raises:
        NumericError: タイルの推論失敗（タイル座標付き）
    """
    if x.shape[2:] != (grid.height, grid.width):
        raise ShapeMismatchError(f"入力 {x.shape} とタイル格子 {grid.height}×{grid.width} が一致しません")

    def run(tile: Tile) -> np.ndarray:
        try:
            return model.forward(x[:, :, tile.rows, tile.cols], mode="infer")[0, 0]
        except NumericError as e:
            raise NumericError(f"タイル {tile.describe()} の推論に失敗しました: {e}", layer=e.layer) from e

    if workers > 1 and len(grid.tiles) > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="tile") as pool:
            outputs = list(pool.map(run, grid.tiles))
    else:
        outputs = [run(tile) for tile in grid.tiles]
    return grid.compose(outputs)


def predict_scene(model: CanopyHeightModel, cube: RasterCube, stats: Optional[NormStats] = None,
                  config: Optional[InferenceConfig] = None, grid: Optional[TileGrid] = None,
                  logger: Optional[Logger] = None) -> HeightMap:
    """
    1撮影日分のシーンの樹高を推論する

    Args:
        model: 学習済みモデル
        cube: 入力キューブ
        stats: 正規化統計量（None ならモデルのもの）
        config: 推論設定
        grid: タイル格子（None なら config から作る）
        logger: ロガー

    Returns:
        HeightMap: 雲・水（設定により雪）を無効にした樹高
    """
    config = config or InferenceConfig()
    config.validate()
    logger = logger or get_default_logger()
    height, width = cube.shape
    grid = grid or TileGrid.for_shape(height, width, config.tile_size, config.overlap)
    if (grid.height, grid.width) != (height, width):
        raise ShapeMismatchError(f"タイル格子 {grid.height}×{grid.width} がシーン {height}×{width} と一致しません")

    x = _input_for(model, cube, stats)
    with logger.timed(f"推論 {cube.acquisition_date} ({len(grid.tiles)} タイル)"):
        heights = predict_array(model, x, grid, config.resolved_workers())
    valid = prediction_mask(cube, config)
    return HeightMap(np.where(valid, heights, np.nan), valid, cube.gsd_m,
                     {"acquisition_date": cube.acquisition_date})


@dataclass(frozen=True)
class SeamReport:
    """タイル推論と全画像推論の差"""
    overlap: int
    tile_size: int
    max_abs_error: float
    max_rel_error: float
    n_pixels: int
    exact_expected: bool


def measure_seam_error(model: CanopyHeightModel, cube: RasterCube, stats: Optional[NormStats] = None,
                       overlap: int = 8, tile_size: int = 128,
                       config: Optional[InferenceConfig] = None) -> SeamReport:
    """有効画素での |タイル推論 − 全画像推論| の最大値"""
    config = replace(config or InferenceConfig(), overlap=overlap, tile_size=tile_size)
    height, width = cube.shape
    grid = TileGrid.for_shape(height, width, tile_size, overlap)
    x = _input_for(model, cube, stats)
    tiled = predict_array(model, x, grid, config.resolved_workers()).astype(np.float64)
    whole = predict_array(model, x, TileGrid.whole(height, width)).astype(np.float64)
    valid = prediction_mask(cube, config)
    if not valid.any():
        raise DataError("有効画素がありません")
    diff = np.abs(tiled - whole)[valid]
    scale = max(float(np.abs(whole[valid]).max()), 1e-12)
    return SeamReport(overlap, tile_size, float(diff.max()), float(diff.max()) / scale,
                      int(valid.sum()), grid.exact_for_radius(model.config.receptive_radius))


# ---------------------------------------------------------------------------
# 多時期融合
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PredictionEntry:
    """1撮影日分の予測と付随情報"""
    hmap: HeightMap
    cloud_prob: np.ndarray
    landcover: np.ndarray
    acquisition_date: str


class PredictionStack:
    """撮影日順に並べた予測の束"""

    def __init__(self, entries: Sequence[PredictionEntry]):
        if not entries:
            raise DataError("予測がありません")
        shape = entries[0].hmap.shape
        for entry in entries:
            if entry.hmap.shape != shape or entry.cloud_prob.shape != shape:
                raise ShapeMismatchError(f"撮影日 {entry.acquisition_date} の形状が {shape} と一致しません")
        DateUtils.assert_unique(e.acquisition_date for e in entries)
        self.entries = sorted(entries, key=lambda e: DateUtils.sort_key(e.acquisition_date))
        self.shape = shape

    @classmethod
    def from_predictions(cls, hmaps: Sequence[HeightMap], cubes: Sequence[RasterCube]) -> "PredictionStack":
        if len(hmaps) != len(cubes):
            raise DataError(f"予測 ({len(hmaps)}) とキューブ ({len(cubes)}) の数が一致しません")
        return cls([PredictionEntry(h, c.cloud_prob, c.landcover, c.acquisition_date)
                    for h, c in zip(hmaps, cubes)])

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def dates(self) -> List[str]:
        return [e.acquisition_date for e in self.entries]

    def heights(self) -> np.ndarray:
        """D×H×W（無効は NaN）"""
        return np.stack([np.where(e.hmap.valid, e.hmap.heights, np.nan) for e in self.entries])

    def valid(self) -> np.ndarray:
        return np.stack([e.hmap.valid for e in self.entries])


def fuse_median(stack: PredictionStack) -> HeightMap:
    """
    画素ごとに有効な撮影日の中央値（偶数個なら中央2値の平均）

    どの日も無効な画素だけが無効になる。
    """
    values = stack.heights().astype(np.float64)
    valid = stack.valid().any(axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        fused = np.nanmedian(values, axis=0)
    gsd = stack.entries[0].hmap.gsd_m
    return HeightMap(np.where(valid, fused, np.nan).astype(np.float32), valid, gsd, {"fusion": "median"})


def fuse_min_cloud(stack: PredictionStack) -> HeightMap:
    """画素ごとに雲確率が最小の有効な撮影日の予測（同値なら早い日）"""
    valid_stack = stack.valid()
    cloud = np.stack([e.cloud_prob.astype(np.float64) for e in stack.entries])
    key = np.where(valid_stack, cloud, np.inf)
    pick = np.argmin(key, axis=0)
    values = np.take_along_axis(stack.heights(), pick[np.newaxis], axis=0)[0]
    valid = valid_stack.any(axis=0)
    gsd = stack.entries[0].hmap.gsd_m
    return HeightMap(np.where(valid, values, np.nan), valid, gsd, {"fusion": "mincloud"})


FUSION_METHODS = {"median": fuse_median, "mincloud": fuse_min_cloud}


def fuse(stack: PredictionStack, method: str) -> HeightMap:
    if method not in FUSION_METHODS:
        raise ConfigError(f"未知の融合方式です: {method} (候補: {', '.join(FUSION_METHODS)})")
    return FUSION_METHODS[method](stack)


@dataclass(frozen=True)
class DateSpread:
    """撮影日ごとの MAE のばらつき"""
    dates: Tuple[str, ...]
    maes: Tuple[float, ...]
    mean: float
    std: float


def per_date_spread(stack: PredictionStack, reference: HeightMap) -> DateSpread:
    """
    撮影日ごとの MAE と、その平均・標本標準偏差

    Raises:
        DataError: 撮影日が2未満
    """
    if len(stack) < 2:
        raise DataError("ばらつきの計算には2撮影日以上が必要です")
    maes = tuple(mae(entry.hmap, reference) for entry in stack.entries)
    values = np.array(maes, dtype=np.float64)
    return DateSpread(tuple(stack.dates), maes, float(values.mean()), float(values.std(ddof=1)))
