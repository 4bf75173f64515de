# -*- coding: utf-8 -*-
"""
前処理: バンド選択・チャンネル正規化・バイリニア拡大・雲マスク
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple, Any

import numpy as np

from core.errors import DataError, MissingBandError, ShapeMismatchError
from core.raster_io import RasterCube, SENTINEL2_BANDS

CLOUD_THRESHOLD = 10.0

BAND_RESOLUTION_M: Dict[str, int] = {
    "B02": 10, "B03": 10, "B04": 10, "B08": 10,
    "B05": 20, "B06": 20, "B07": 20, "B8A": 20, "B11": 20, "B12": 20,
    "B01": 60, "B09": 60, "B10": 60,
}

_RGB = ("B02", "B03", "B04")
SUBSET_BANDS: Dict[str, Tuple[str, ...]] = {
    "ALL": SENTINEL2_BANDS,
    "RGB": _RGB,
    "N": ("B08",),
    "RGBN": _RGB + ("B08",),
    "woRGBN": tuple(b for b in SENTINEL2_BANDS if BAND_RESOLUTION_M[b] != 10),
}


@dataclass(frozen=True)
class BandSubset:
    """入力に使うバンドの組み合わせ"""
    name: str
    band_ids: Tuple[str, ...]

    @classmethod
    def from_name(cls, name: str) -> "BandSubset":
        if name not in SUBSET_BANDS:
            raise DataError(f"未知のバンドサブセットです: {name} (候補: {', '.join(SUBSET_BANDS)})")
        return cls(name, SUBSET_BANDS[name])

    @classmethod
    def from_bands(cls, band_ids: Sequence[str]) -> "BandSubset":
        """バンド列から復元（既知の組み合わせなら名前も付ける）"""
        band_ids = tuple(band_ids)
        for name, bands in SUBSET_BANDS.items():
            if bands == band_ids:
                return cls(name, bands)
        unknown = [b for b in band_ids if b not in BAND_RESOLUTION_M]
        if unknown:
            raise DataError(f"未知のバンドです: {', '.join(unknown)}")
        return cls("custom", band_ids)

    def __len__(self) -> int:
        return len(self.band_ids)


@dataclass(frozen=True, eq=False)
class NormStats:
    """チャンネルごとの平均・標準偏差（band_ids の順）"""
    mean: np.ndarray
    std: np.ndarray
    band_ids: Tuple[str, ...]

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).copy()
        std = np.asarray(self.std, dtype=np.float64).copy()
        if mean.shape != std.shape or mean.shape != (len(self.band_ids),):
            raise ShapeMismatchError(f"統計量の長さが一致しません: mean={mean.shape}, std={std.shape}, "
                                     f"bands={len(self.band_ids)}")
        if np.any(~(std > 0)):
            raise DataError("標準偏差は正である必要があります")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        object.__setattr__(self, "band_ids", tuple(self.band_ids))

    def to_dict(self) -> Dict[str, Any]:
        return {"band_ids": list(self.band_ids),
                "mean": [float(v) for v in self.mean],
                "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NormStats":
        return cls(np.array(data["mean"], dtype=np.float64),
                   np.array(data["std"], dtype=np.float64),
                   tuple(data["band_ids"]))

    @classmethod
    def identity(cls, band_ids: Sequence[str]) -> "NormStats":
        n = len(band_ids)
        return cls(np.zeros(n), np.ones(n), tuple(band_ids))


def band_resolution(band_id: str) -> int:
    """バンドの原解像度（m）"""
    try:
        return BAND_RESOLUTION_M[band_id]
    except KeyError as e:
        raise DataError(f"未知のバンドです: {band_id}") from e


def cloud_mask(cloud_prob: np.ndarray, threshold: float = CLOUD_THRESHOLD) -> np.ndarray:
    """
    雲確率から雲マスクを作る（threshold を厳密に超えたら雲）

    Args:
        cloud_prob: H×W の雲確率 [%]
        threshold: しきい値 [%]

    Returns:
        np.ndarray: True が雲
    """
    prob = np.asarray(cloud_prob)
    if prob.size and (np.nanmin(prob) < 0.0 or np.nanmax(prob) > 100.0 or np.isnan(prob).any()):
        raise DataError("雲確率は [0, 100] の範囲である必要があります")
    return prob > threshold


def select_bands(cube: RasterCube, subset: BandSubset) -> np.ndarray:
    """
    サブセットのバンドを正準順で取り出す

    Returns:
        np.ndarray: 1×|subset|×H×W (float32)
    """
    missing = [b for b in subset.band_ids if b not in cube.band_ids]
    if missing:
        raise MissingBandError(missing, list(cube.band_ids))
    index = [cube.band_ids.index(b) for b in subset.band_ids]
    return cube.bands[index][np.newaxis].astype(np.float32, copy=True)


def stats_pixel_mask(cube: RasterCube, exclude_cloudy: bool = True) -> np.ndarray:
    """統計量計算に使う画素（有効 かつ 必要なら雲なし）"""
    mask = cube.valid.copy()
    if exclude_cloudy:
        mask &= ~cloud_mask(cube.cloud_prob)
    return mask


def compute_norm_stats(cubes: Iterable[RasterCube], subset: BandSubset,
                       exclude_cloudy: bool = True,
                       pixel_masks: Sequence[np.ndarray] = None) -> NormStats:
    """
    学習キューブからチャンネル統計量を計算する（母標準偏差, float64 集計）

    Args:
        cubes: 学習用キューブ
        subset: 使用バンド
        exclude_cloudy: 雲画素を除外するか
        pixel_masks: 追加の画素マスク（学習領域など）。cubes と同じ順序

    Raises:
        DataError: 有効画素が無い、または分散ゼロのチャンネル
    """
    cubes = list(cubes)
    if not cubes:
        raise DataError("統計量を計算するキューブがありません")
    columns: List[List[np.ndarray]] = [[] for _ in subset.band_ids]
    for i, cube in enumerate(cubes):
        mask = stats_pixel_mask(cube, exclude_cloudy)
        if pixel_masks is not None:
            mask &= np.asarray(pixel_masks[i], dtype=bool)
        selected = select_bands(cube, subset)[0]
        for c in range(len(subset)):
            columns[c].append(selected[c][mask])

    means, stds = [], []
    for band_id, parts in zip(subset.band_ids, columns):
        values = np.concatenate(parts).astype(np.float64)
        if values.size == 0:
            raise DataError(f"チャンネル {band_id} に有効画素がありません")
        mean = values.mean(dtype=np.float64)
        std = values.std(dtype=np.float64)
        if not std > 0:
            raise DataError(f"チャンネル {band_id} の分散がゼロです")
        means.append(mean)
        stds.append(std)
    return NormStats(np.array(means), np.array(stds), subset.band_ids)


def normalize(bands: np.ndarray, stats: NormStats) -> np.ndarray:
    """
    (x − mean) / std をチャンネルごとに適用

    Args:
        bands: C×H×W または N×C×H×W
        stats: 正規化統計量

    Returns:
        np.ndarray: N×C×H×W (float32)
    """
    x = np.asarray(bands)
    if x.ndim == 3:
        x = x[np.newaxis]
    if x.ndim != 4 or x.shape[1] != len(stats.band_ids):
        raise ShapeMismatchError(f"チャンネル数が統計量と一致しません: 入力 {x.shape}, "
                                 f"統計量 {len(stats.band_ids)}")
    mean = stats.mean[np.newaxis, :, np.newaxis, np.newaxis]
    std = stats.std[np.newaxis, :, np.newaxis, np.newaxis]
    return ((x.astype(np.float64) - mean) / std).astype(np.float32)


def prepare_input(cube: RasterCube, subset: BandSubset, stats: NormStats) -> np.ndarray:
    """バンド選択 → 正規化 → 無効画素を 0（学習平均）に置換"""
    if tuple(stats.band_ids) != tuple(subset.band_ids):
        raise ShapeMismatchError(f"統計量のバンド {stats.band_ids} がサブセット "
                                 f"{subset.band_ids} と一致しません")
    x = normalize(select_bands(cube, subset), stats)
    x[:, :, ~cube.valid] = 0.0
    return x


def _interp_axis(length: int, factor: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # 画素中心合わせ、端はクランプ
    coords = (np.arange(length * factor, dtype=np.float64) + 0.5) / factor - 0.5
    coords = np.clip(coords, 0.0, length - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, length - 1)
    return lo, hi, coords - lo


def upsample_bilinear(plane: np.ndarray, factor: int) -> np.ndarray:
    """
    低解像度バンドを整数倍にバイリニア拡大する

    Args:
        plane: H×W の平面
        factor: 拡大率（20 m → 10 m なら 2, 60 m → 10 m なら 6）

    Returns:
        np.ndarray: (factor·H)×(factor·W) の平面
    """
    if int(factor) != factor or factor < 1:
        raise ValueError(f"拡大率は1以上の整数である必要があります: {factor}")
    factor = int(factor)
    src = np.asarray(plane, dtype=np.float64)
    if src.ndim != 2:
        raise ShapeMismatchError(f"平面は H×W である必要があります: {src.shape}")
    in_dtype = np.asarray(plane).dtype
    out_dtype = in_dtype if np.issubdtype(in_dtype, np.floating) else np.float64
    if factor == 1:
        return src.astype(out_dtype)

    row_lo, row_hi, row_t = _interp_axis(src.shape[0], factor)
    col_lo, col_hi, col_t = _interp_axis(src.shape[1], factor)
    top = src[row_lo]
    rows = top + row_t[:, np.newaxis] * (src[row_hi] - top)
    left = rows[:, col_lo]
    out = left + col_t[np.newaxis, :] * (rows[:, col_hi] - left)
    return out.astype(out_dtype)
