# -*- coding: utf-8 -*-
"""
合成シーン生成

机上規模で学習・評価を回すための決定的なシーン生成器。
反射率 = バンドごとの基準値 + 局所3×3平均樹高と局所3×3標準偏差のアフィン結合
         + 撮影日ごとのオフセット + 画素ごとのガウス雑音
20 m / 60 m バンドはブロック平均してから upsample_bilinear で 10 m に戻す。
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn
from scipy.stats import norm

from core.errors import ConfigError, DataError, ShapeMismatchError
from core.preprocess import BAND_RESOLUTION_M, cloud_mask, upsample_bilinear
from core.raster_io import HeightMap, LandCover, RasterCube, SENTINEL2_BANDS
from utils.date_utils import DateUtils
from utils.random_utils import make_rng

# 反射率ルール: band → (基準値, 平均樹高の係数, 局所標準偏差の係数)
BAND_RESPONSE: Dict[str, Tuple[float, float, float]] = {
    "B01": (0.12, -0.02, 0.005),
    "B02": (0.10, -0.03, 0.010),
    "B03": (0.12, -0.02, 0.015),
    "B04": (0.14, -0.06, 0.020),
    "B05": (0.18, -0.02, 0.020),
    "B06": (0.22, 0.05, 0.025),
    "B07": (0.24, 0.08, 0.030),
    "B08": (0.25, 0.12, 0.040),
    "B8A": (0.26, 0.11, 0.035),
    "B09": (0.08, 0.03, 0.010),
    "B10": (0.01, 0.00, 0.002),
    "B11": (0.28, -0.08, 0.020),
    "B12": (0.22, -0.09, 0.015),
}

# 水は近赤外で暗い
WATER_REFLECTANCE = {b: (0.02 if b in ("B07", "B08", "B8A") else 0.04) for b in SENTINEL2_BANDS}
SNOW_REFLECTANCE = {b: (0.85 if BAND_RESOLUTION_M[b] == 10 else 0.45) for b in SENTINEL2_BANDS}
CLOUD_REFLECTANCE = 0.6
VEGETATION_MIN_HEIGHT_M = 2.0

# 参照予測器に使う 10 m バンド
REFERENCE_BANDS = ("B02", "B03", "B04", "B08")


@dataclass(frozen=True)
class SceneSpec:
    """合成シーンの仕様"""
    seed: int = 1
    height: int = 64
    width: int = 64
    correlation_length_px: float = 8.0
    max_height_m: float = 40.0
    mean_scale_m: float = 30.0
    std_scale_m: float = 5.0
    crown_roughness: float = 0.15
    cloud_coverage_fraction: float = 0.0
    n_dates: int = 3
    noise_sigma: float = 0.01
    date_jitter: float = 0.005
    water_fraction: float = 0.0
    snow_fraction: float = 0.0
    start_date: str = "2020-01-05"
    revisit_days: int = 5
    gsd_m: float = 10.0

    def validate(self):
        """仕様の検査（不正なら ConfigError）"""
        problems = []
        if self.height < 1 or self.width < 1:
            problems.append(f"size は正である必要があります: {self.height}×{self.width}")
        if self.n_dates < 1:
            problems.append(f"n_dates は1以上: {self.n_dates}")
        if self.correlation_length_px <= 0:
            problems.append(f"correlation_length_px は正: {self.correlation_length_px}")
        if self.max_height_m < 0:
            problems.append(f"max_height_m は0以上: {self.max_height_m}")
        if self.mean_scale_m <= 0 or self.std_scale_m <= 0:
            problems.append("mean_scale_m / std_scale_m は正である必要があります")
        for name in ("cloud_coverage_fraction", "water_fraction", "snow_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                problems.append(f"{name} は [0, 1]: {value}")
        if self.water_fraction + self.snow_fraction > 1.0:
            problems.append("water_fraction + snow_fraction が1を超えています")
        if self.noise_sigma < 0 or self.date_jitter < 0 or self.crown_roughness < 0:
            problems.append("noise_sigma / date_jitter / crown_roughness は0以上")
        if self.revisit_days < 1:
            problems.append(f"revisit_days は1以上: {self.revisit_days}")
        if self.gsd_m <= 0:
            problems.append(f"gsd_m は正: {self.gsd_m}")
        try:
            DateUtils.parse_acquisition_date(self.start_date)
        except DataError as e:
            problems.append(str(e))
        if problems:
            raise ConfigError("シーン仕様が不正です: " + "; ".join(problems))


def _unit_field(rng: np.random.Generator, shape: Tuple[int, int], sigma: float) -> np.ndarray:
    """平均0・分散1に正規化した空間相関場"""
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="reflect")
    field -= field.mean()
    spread = field.std()
    return field / spread if spread > 0 else field


def _quantile_mask(field: np.ndarray, fraction: float, upper: bool) -> np.ndarray:
    if fraction <= 0.0:
        return np.zeros(field.shape, dtype=bool)
    if upper:
        return field > np.quantile(field, 1.0 - fraction)
    return field <= np.quantile(field, fraction)


def local_height_stats(heights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """局所3×3の平均と標準偏差（端は最近傍で延長）"""
    h = heights.astype(np.float64)
    mean = ndimage.uniform_filter(h, size=3, mode="nearest")
    mean_sq = ndimage.uniform_filter(h * h, size=3, mode="nearest")
    std = np.sqrt(np.maximum(mean_sq - mean * mean, 0.0))
    return mean, std


def clean_reflectance(spec: SceneSpec, heights: np.ndarray, landcover: np.ndarray) -> np.ndarray:
    """
    雑音なしの反射率（13×H×W, float64）

    Args:
        spec: シーン仕様
        heights: 樹高 [m]
        landcover: 土地被覆
    """
    mean, std = local_height_stats(heights)
    mean_n = mean / spec.mean_scale_m
    std_n = std / spec.std_scale_m
    water = landcover == LandCover.WATER
    snow = landcover == LandCover.SNOW
    planes = []
    for band in SENTINEL2_BANDS:
        base, gain_mean, gain_std = BAND_RESPONSE[band]
        plane = base + gain_mean * mean_n + gain_std * std_n
        plane = np.where(water, WATER_REFLECTANCE[band], plane)
        plane = np.where(snow, SNOW_REFLECTANCE[band], plane)
        planes.append(plane)
    return np.stack(planes)


def degrade_band(plane: np.ndarray, factor: int) -> np.ndarray:
    """低解像度センサを模擬: factor×factor のブロック平均 → バイリニア拡大 → 切り出し"""
    if factor == 1:
        return plane
    height, width = plane.shape
    pad_h = (-height) % factor
    pad_w = (-width) % factor
    padded = np.pad(plane, ((0, pad_h), (0, pad_w)), mode="edge")
    blocks = padded.reshape(padded.shape[0] // factor, factor, padded.shape[1] // factor, factor)
    coarse = blocks.mean(axis=(1, 3), dtype=np.float64)
    return upsample_bilinear(coarse, factor)[:height, :width]


def cloud_probability(field: np.ndarray, fraction: float) -> np.ndarray:
    """
    相関場から雲確率を作る

    上位 fraction の画素は (10, 100]、それ以外は [0, 8] に割り当てる。
    """
    prob = np.zeros(field.shape, dtype=np.float64)
    cloudy = _quantile_mask(field, fraction, upper=True)
    lo, hi = float(field.min()), float(field.max())
    if cloudy.any():
        threshold = float(field[~cloudy].max()) if (~cloudy).any() else lo
        span = max(hi - threshold, 1e-12)
        prob[cloudy] = 11.0 + 89.0 * (field[cloudy] - threshold) / span
    clear = ~cloudy
    if clear.any():
        top = float(field[clear].max())
        span = max(top - lo, 1e-12)
        prob[clear] = 8.0 * (field[clear] - lo) / span
    return np.clip(prob, 0.0, 100.0)


def generate_height_field(spec: SceneSpec) -> Tuple[np.ndarray, np.ndarray]:
    """樹高場と土地被覆を生成"""
    shape = (spec.height, spec.width)
    rng = make_rng(spec.seed, "height")
    smooth = norm.cdf(_unit_field(rng, shape, spec.correlation_length_px))
    crowns = _unit_field(rng, shape, 1.0)
    heights = spec.max_height_m * smooth * (1.0 + spec.crown_roughness * crowns)
    heights = np.clip(heights, 0.0, spec.max_height_m)

    cover_rng = make_rng(spec.seed, "landcover")
    water = _quantile_mask(_unit_field(cover_rng, shape, 2.0 * spec.correlation_length_px),
                           spec.water_fraction, upper=False)
    snow = _quantile_mask(_unit_field(cover_rng, shape, 2.0 * spec.correlation_length_px),
                          spec.snow_fraction, upper=True) & ~water
    heights[water] = 0.0

    landcover = np.full(shape, LandCover.OTHER, dtype=np.uint8)
    landcover[heights >= VEGETATION_MIN_HEIGHT_M] = LandCover.VEGETATION
    landcover[water] = LandCover.WATER
    landcover[snow] = LandCover.SNOW
    return heights, landcover


def generate_scene(spec: SceneSpec) -> Tuple[List[RasterCube], HeightMap]:
    """
    合成シーンを生成する（同じ仕様からはビット単位で同じ結果）

    Args:
        spec: シーン仕様

    Returns:
        Tuple[List[RasterCube], HeightMap]: 撮影日ごとのキューブと共通の参照樹高
    """
    spec.validate()
    heights, landcover = generate_height_field(spec)
    clean = clean_reflectance(spec, heights, landcover)
    dates = DateUtils.revisit_series(spec.start_date, spec.n_dates, spec.revisit_days)
    shape = (spec.height, spec.width)

    cubes = []
    for index, acquisition_date in enumerate(dates):
        rng = make_rng(spec.seed, f"date-{index}")
        offsets = rng.normal(0.0, spec.date_jitter, size=len(SENTINEL2_BANDS)) if spec.date_jitter else \
            np.zeros(len(SENTINEL2_BANDS))
        noise = rng.standard_normal((len(SENTINEL2_BANDS),) + shape) * spec.noise_sigma
        prob = cloud_probability(_unit_field(rng, shape, spec.correlation_length_px),
                                 spec.cloud_coverage_fraction)
        haze = np.maximum(prob - 10.0, 0.0) / 90.0

        bands = clean + offsets[:, np.newaxis, np.newaxis] + noise
        bands = bands + haze[np.newaxis] * (CLOUD_REFLECTANCE - bands)
        for b, band in enumerate(SENTINEL2_BANDS):
            bands[b] = degrade_band(bands[b], BAND_RESOLUTION_M[band] // 10)

        cubes.append(RasterCube(
            bands=bands.astype(np.float32),
            cloud_prob=prob.astype(np.float32),
            landcover=landcover,
            valid=np.ones(shape, dtype=bool),
            gsd_m=spec.gsd_m,
            acquisition_date=acquisition_date,
            band_ids=SENTINEL2_BANDS,
        ))

    reference = HeightMap(heights.astype(np.float32), np.ones(shape, dtype=bool), spec.gsd_m)
    return cubes, reference


def box3_eigenvalues(n: int) -> np.ndarray:
    """3×3 平均（端は最近傍）の1方向分の固有値。DCT-II の基底で対角化される"""
    return (1.0 + 2.0 * np.cos(np.pi * np.arange(n) / n)) / 3.0


def local_mean_estimate(cube: RasterCube, spec: SceneSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    10 m バンドから (局所平均, 局所標準偏差) を最小二乗で逆算し、局所平均 [m] を返す

    Returns:
        Tuple[np.ndarray, np.ndarray]: 局所平均樹高、逆算に使える画素（晴天・有効・水雪以外）
    """
    missing = [b for b in REFERENCE_BANDS if b not in cube.band_ids]
    if missing:
        raise DataError(f"参照予測器には {', '.join(missing)} が必要です")
    design = np.array([[BAND_RESPONSE[b][1], BAND_RESPONSE[b][2]] for b in REFERENCE_BANDS])
    base = np.array([BAND_RESPONSE[b][0] for b in REFERENCE_BANDS])
    observed = np.stack([cube.band(b).astype(np.float64) for b in REFERENCE_BANDS])
    residual = (observed - base[:, np.newaxis, np.newaxis]).reshape(len(REFERENCE_BANDS), -1)
    solution, *_ = np.linalg.lstsq(design, residual, rcond=None)
    mean = (solution[0] * spec.mean_scale_m).reshape(cube.shape)
    usable = (cube.valid & ~cloud_mask(cube.cloud_prob)
              & (cube.landcover != LandCover.WATER) & (cube.landcover != LandCover.SNOW))
    return mean, usable


def _mean_noise_variance(spec: SceneSpec, looks: float) -> float:
    """局所平均の推定誤差の分散（画素雑音と撮影日オフセットを合わせた近似）"""
    design = np.array([[BAND_RESPONSE[b][1], BAND_RESPONSE[b][2]] for b in REFERENCE_BANDS])
    gain = float(np.linalg.inv(design.T @ design)[0, 0])
    sigma2 = spec.noise_sigma ** 2 + spec.date_jitter ** 2
    return sigma2 * gain * spec.mean_scale_m ** 2 / max(looks, 1.0)


def deconvolve_box3(mean: np.ndarray, noise_variance: float = 0.0) -> np.ndarray:
    """
    3×3 平均を DCT 領域で戻す（Wiener 型。noise_variance=0 なら厳密な逆演算）

    固有値 0 の成分は復元できないので 0 とする。
    """
    centre = float(mean.mean())
    coeffs = dctn(mean - centre, type=2, norm="ortho")
    lam = np.outer(box3_eigenvalues(mean.shape[0]), box3_eigenvalues(mean.shape[1]))
    signal = float(np.mean(np.square(coeffs)))
    alpha = noise_variance / signal if signal > 0 else 0.0
    denom = lam * lam + alpha
    restored = np.divide(lam * coeffs, denom, out=np.zeros_like(coeffs), where=denom > 1e-12)
    return idctn(restored, type=2, norm="ortho") + centre


def reference_predictor(cubes: Union[RasterCube, Sequence[RasterCube]], spec: SceneSpec) -> HeightMap:
    """
    生成ルールを既知とした参照予測器

    撮影日ごとに局所平均を逆算して晴天の日で平均し、3×3 平均を逆に解いて画素の樹高を求める。
    水は樹高 0。どの日も晴天でない画素と雪は無効。

    Args:
        cubes: キューブ、またはキューブの列（同じシーン）
        spec: シーンを生成した仕様
    """
    cubes = [cubes] if isinstance(cubes, RasterCube) else list(cubes)
    if not cubes:
        raise DataError("参照予測器に渡すキューブがありません")
    total = np.zeros(cubes[0].shape)
    looks = np.zeros(cubes[0].shape)
    for cube in cubes:
        if cube.shape != cubes[0].shape:
            raise ShapeMismatchError(f"キューブ {cube.acquisition_date} の形状 {cube.shape} が {cubes[0].shape} と一致しません")
        mean, usable = local_mean_estimate(cube, spec)
        total += np.where(usable, mean, 0.0)
        looks += usable
    observed = looks > 0
    if not observed.any():
        raise DataError("局所平均を逆算できる画素がありません")
    mean = np.where(observed, total / np.maximum(looks, 1.0), 0.0)
    if not observed.all():
        indices = ndimage.distance_transform_edt(~observed, return_distances=False, return_indices=True)
        mean = mean[tuple(indices)]

    noise = _mean_noise_variance(spec, float(looks[observed].mean()))
    heights = np.clip(deconvolve_box3(mean, noise), 0.0, spec.max_height_m)
    landcover = cubes[0].landcover
    water = landcover == LandCover.WATER
    heights[water] = 0.0
    valid = (observed | water) & (landcover != LandCover.SNOW)
    return HeightMap(np.where(valid, heights, np.nan).astype(np.float32), valid, cubes[0].gsd_m)
