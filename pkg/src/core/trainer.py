# -*- coding: utf-8 -*-
"""
学習

15×15 パッチのサンプリング（雲・有効画素ルール）、マスク付き二乗誤差＋重み減衰の損失、
ADAM による最適化、検証損失の監視と最良チェックポイントの保持を行う。
"""

import math
import queue
import threading
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Any

import numpy as np
import pandas as pd
from scipy import ndimage

from core.checkpoint import Checkpoint, save_checkpoint
from core.errors import CheckpointFormatError, ConfigError, DataError, NumericError, ShapeMismatchError
from core.model import CanopyHeightModel, ModelConfig
from core.preprocess import (
    CLOUD_THRESHOLD, BandSubset, NormStats, cloud_mask, compute_norm_stats, prepare_input,
)
from core.raster_io import HeightMap, RasterCube
from utils.file_utils import FileUtils
from utils.logger import Logger, get_default_logger
from utils.random_utils import make_rng

LOSS_CURVE_COLUMNS = ["iteration", "train_loss", "val_loss"]
BEST_CHECKPOINT = "best.chkp"
LAST_CHECKPOINT = "last.chkp"
DIVERGENCE_DUMP = "divergence_dump.chkp"
LOSS_CURVE = "loss_curve.csv"


@dataclass(frozen=True)
class TrainConfig:
    """最適化の設定"""
    base_lr: float = 1e-4
    batch_size: int = 36
    weight_decay: float = 0.0
    max_iterations: int = 10000
    val_every: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 1
    patch_size: int = 15
    max_cloudy_fraction: float = 0.1
    prefetch_depth: int = 4

    def validate(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr は正: {self.base_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size は1以上: {self.batch_size}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay は0以上: {self.weight_decay}")
        if self.max_iterations < 0:
            raise ConfigError(f"max_iterations は0以上: {self.max_iterations}")
        if self.val_every < 1:
            raise ConfigError(f"val_every は1以上: {self.val_every}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0) or not self.adam_eps > 0:
            raise ConfigError("ADAM の β1, β2 は [0, 1)、ε は正である必要があります")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size は正の奇数: {self.patch_size}")
        if not 0.0 < self.max_cloudy_fraction <= 1.0:
            raise ConfigError(f"max_cloudy_fraction は (0, 1]: {self.max_cloudy_fraction}")
        if self.prefetch_depth < 1:
            raise ConfigError(f"prefetch_depth は1以上: {self.prefetch_depth}")


@dataclass(frozen=True)
class DataConfig:
    """学習データの設定"""
    band_subset: str = "ALL"
    split_fractions: Tuple[float, ...] = (0.6, 0.15, 0.25)
    exclude_cloudy_stats: bool = True
    val_patches: int = 2000

    def validate(self):
        try:
            BandSubset.from_name(self.band_subset)
        except DataError as e:
            raise ConfigError(str(e)) from e
        fractions = tuple(self.split_fractions)
        if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
            raise ConfigError(f"split_fractions は和が1の3要素: {fractions}")
        if self.val_patches < 1:
            raise ConfigError(f"val_patches は1以上: {self.val_patches}")


@dataclass(frozen=True)
class TrainSetup:
    """学習設定一式（train / model / data セクション）"""
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(trunk_width=64, n_blocks=4,
                                                                   entry_depths=(16, 32)))
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        self.train.validate()
        self.data.validate()
        self.resolved_model().validate()

    def resolved_model(self, band_subset: Optional[str] = None,
                       kernel_mode: Optional[str] = None) -> ModelConfig:
        """入力チャンネル数はバンドサブセット、シードは train.seed から決める"""
        subset = BandSubset.from_name(band_subset or self.data.band_subset)
        return replace(self.model, in_channels=len(subset), seed=self.train.seed,
                       kernel_mode=kernel_mode or self.model.kernel_mode)

    def with_variant(self, band_subset: str, kernel_mode: str) -> "TrainSetup":
        return replace(self, data=replace(self.data, band_subset=band_subset),
                       model=replace(self.model, kernel_mode=kernel_mode))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self.data)
        data["split_fractions"] = list(self.data.split_fractions)
        return {"train": asdict(self.train), "model": self.model.to_dict(), "data": data}


@dataclass
class PatchBatch:
    """パッチのバッチ"""
    inputs: np.ndarray
    targets: np.ndarray
    target_valid: np.ndarray

    def __post_init__(self):
        n = self.inputs.shape[0]
        if self.targets.shape[0] != n or self.target_valid.shape != self.targets.shape:
            raise ShapeMismatchError(f"パッチ配列の形状が一致しません: {self.inputs.shape}, "
                                     f"{self.targets.shape}, {self.target_valid.shape}")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def slice(self, start: int, stop: int) -> "PatchBatch":
        return PatchBatch(self.inputs[start:stop], self.targets[start:stop], self.target_valid[start:stop])


# ---------------------------------------------------------------------------
# 領域分割とパッチサンプリング
# ---------------------------------------------------------------------------

def split_regions(shape: Tuple[int, int],
                  fractions: Sequence[float] = (0.6, 0.15, 0.25)) -> Dict[str, np.ndarray]:
    """
    画像を行方向の帯で train / val / test に分割する（互いに素）

    Args:
        shape: (H, W)
        fractions: 各領域の行の割合

    Returns:
        Dict[str, np.ndarray]: 領域名 → H×W の真偽マスク
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise ConfigError(f"split_fractions は和が1の3要素: {fractions}")
    height, width = shape
    bounds = [int(round(b)) for b in np.cumsum(fractions) * height]
    bounds[-1] = height
    starts = [0] + bounds[:-1]
    regions = {}
    for name, lo, hi in zip(("train", "val", "test"), starts, bounds):
        mask = np.zeros((height, width), dtype=bool)
        mask[lo:hi] = True
        regions[name] = mask
    return regions


def spatial_folds(shape: Tuple[int, int], n_folds: int = 3, guard: int = 0,
                  val_fraction: float = 0.25) -> List[Dict[str, np.ndarray]]:
    """
    列方向のブロックを1つずつ test 領域として残す地理的な分割

    test ブロックの左右 guard 列は学習にも検証にも使わない。
    残りの列は行方向に train（上側）と val（下側 val_fraction）に分ける。

    Args:
        shape: (H, W)
        n_folds: ブロック数（2以上）
        guard: test ブロックとの間に空ける列数
        val_fraction: 残りの列のうち val に回す行の割合

    Returns:
        List[Dict[str, np.ndarray]]: フォールドごとの 領域名 → H×W の真偽マスク
    """
    height, width = shape
    if n_folds < 2 or n_folds > width:
        raise ConfigError(f"n_folds は 2 以上 {width} 以下: {n_folds}")
    if guard < 0:
        raise ConfigError(f"guard は0以上: {guard}")
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction は (0, 1): {val_fraction}")
    val_start = height - max(1, int(round(val_fraction * height)))
    if val_start < 1:
        raise ConfigError(f"行数 {height} では train と val に分けられません")

    folds = []
    for block in np.array_split(np.arange(width), n_folds):
        test = np.zeros(shape, dtype=bool)
        test[:, block] = True
        excluded = np.zeros(width, dtype=bool)
        excluded[max(0, block[0] - guard):block[-1] + guard + 1] = True
        if excluded.all():
            raise ConfigError(f"guard={guard} ではブロック {block[0]}-{block[-1]} 以外に学習列が残りません")
        train = np.zeros(shape, dtype=bool)
        train[:val_start, ~excluded] = True
        val = np.zeros(shape, dtype=bool)
        val[val_start:, ~excluded] = True
        folds.append({"train": train, "val": val, "test": test})
    return folds


def eligible_centers(cloud_prob: np.ndarray, target_valid: np.ndarray, patch_size: int = 15,
                     max_cloudy_fraction: float = 0.1,
                     cloud_threshold: float = CLOUD_THRESHOLD) -> np.ndarray:
    """
    パッチ中心として使える画素

    中心の正解が有効、窓が画像内に収まる（境界から patch_size//2 以上）、
    窓内の雲画素が max_cloudy_fraction 未満。

    Returns:
        np.ndarray: H×W の真偽マスク
    """
    half = patch_size // 2
    cloudy = cloud_mask(cloud_prob, cloud_threshold).astype(np.int32)
    counts = ndimage.correlate(cloudy, np.ones((patch_size, patch_size), dtype=np.int32),
                               mode="constant", cval=0)
    ok = counts < max_cloudy_fraction * patch_size * patch_size
    ok &= np.asarray(target_valid, dtype=bool)
    height, width = ok.shape
    inside = np.zeros_like(ok)
    if height > 2 * half and width > 2 * half:
        inside[half:height - half, half:width - half] = True
    return ok & inside


class PatchSampler:
    """適格な (撮影日, 中心) を前計算しておき、一様にパッチを引く"""

    def __init__(self, cubes: Sequence[RasterCube], reference: HeightMap, stats: NormStats,
                 subset: BandSubset, region: Optional[np.ndarray] = None, patch_size: int = 15,
                 max_cloudy_fraction: float = 0.1, cloud_threshold: float = CLOUD_THRESHOLD):
        """
        初期化

        Args:
            cubes: 撮影日ごとのキューブ
            reference: 参照樹高
            stats: 正規化統計量
            subset: 使用バンド
            region: 中心・損失に使う領域マスク（None なら全域）
            patch_size: パッチの一辺
            max_cloudy_fraction: 雲画素の割合の上限（未満なら採用）
            cloud_threshold: 雲判定のしきい値 [%]
        """
        if not cubes:
            raise DataError("パッチを引くキューブがありません")
        self.patch_size = patch_size
        self.half = patch_size // 2
        region = np.ones(reference.shape, dtype=bool) if region is None else np.asarray(region, dtype=bool)

        self.inputs: List[np.ndarray] = []
        self.target_valid: List[np.ndarray] = []
        centers = []
        for index, cube in enumerate(cubes):
            if cube.shape != reference.shape:
                raise ShapeMismatchError(f"キューブ {cube.acquisition_date} の形状 {cube.shape} が "
                                         f"参照 {reference.shape} と一致しません")
            self.inputs.append(prepare_input(cube, subset, stats)[0])
            valid = reference.valid & region & cube.valid
            self.target_valid.append(valid)
            rows, cols = np.nonzero(eligible_centers(cube.cloud_prob, valid, patch_size,
                                                     max_cloudy_fraction, cloud_threshold))
            centers.append(np.stack([np.full(rows.shape, index), rows, cols], axis=1))
        self.targets = np.where(reference.valid, reference.heights, 0.0).astype(np.float32)
        self.centers = np.concatenate(centers).astype(np.int64)
        if len(self.centers) == 0:
            raise DataError("条件を満たすパッチ中心がありません")

    def __len__(self) -> int:
        return len(self.centers)

    def gather(self, picks: np.ndarray) -> PatchBatch:
        """中心リストの指定行からパッチを切り出す"""
        size = self.patch_size
        channels = self.inputs[0].shape[0]
        inputs = np.empty((len(picks), channels, size, size), dtype=np.float32)
        targets = np.empty((len(picks), 1, size, size), dtype=np.float32)
        valid = np.empty((len(picks), 1, size, size), dtype=bool)
        for i, pick in enumerate(picks):
            date, row, col = self.centers[pick]
            rows = slice(row - self.half, row + self.half + 1)
            cols = slice(col - self.half, col + self.half + 1)
            inputs[i] = self.inputs[date][:, rows, cols]
            targets[i, 0] = self.targets[rows, cols]
            valid[i, 0] = self.target_valid[date][rows, cols]
        return PatchBatch(inputs, targets, valid)

    def draw(self, n: int, rng: np.random.Generator) -> PatchBatch:
        """適格な中心から一様に n 個（復元抽出）"""
        return self.gather(rng.integers(0, len(self.centers), size=n))


def sample_patches(cubes: Sequence[RasterCube], heights: HeightMap, stats: NormStats, n: int,
                   rng: np.random.Generator, subset: Optional[BandSubset] = None,
                   region: Optional[np.ndarray] = None, **patch: Any) -> PatchBatch:
    """
    パッチを n 個引く（PatchSampler の単発版。固定の検証集合に使う）

    Args:
        subset: 使用バンド（None なら stats のバンド）
        region: 中心・損失に使う領域マスク
        **patch: PatchSampler の patch_size / max_cloudy_fraction / cloud_threshold
    """
    subset = subset or BandSubset.from_bands(stats.band_ids)
    return PatchSampler(cubes, heights, stats, subset, region, **patch).draw(n, rng)


class PatchPrefetcher:
    """
    パッチ生成を別スレッドで先読みする有界キュー

    生成側は1スレッドだけなので、同じ乱数生成器なら順序は決定的。
    """

    def __init__(self, sampler: PatchSampler, batch_size: int, rng: np.random.Generator, depth: int = 4):
        self._sampler = sampler
        self._batch_size = batch_size
        self._rng = rng
        self._queue: "queue.Queue[Any]" = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._produce, name="patch-prefetch", daemon=True)
        self._thread.start()

    def _put(self, item: Any):
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def _produce(self):
        try:
            while not self._stop.is_set():
                self._put(self._sampler.draw(self._batch_size, self._rng))
        except Exception as e:  # 消費側で再送出する
            self._put(e)

    def __iter__(self) -> Iterator[PatchBatch]:
        return self

    def __next__(self) -> PatchBatch:
        item = self._queue.get()
        if isinstance(item, Exception):
            raise item
        return item

    def close(self):
        self._stop.set()
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                break
        self._thread.join(timeout=5.0)

    def __enter__(self) -> "PatchPrefetcher":
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()


# ---------------------------------------------------------------------------
# 損失
# ---------------------------------------------------------------------------

def _valid_residuals(pred: np.ndarray, targets: np.ndarray, valid: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mask = np.asarray(valid, dtype=bool)
    if pred.shape != targets.shape or mask.shape != pred.shape:
        raise ShapeMismatchError(f"予測・正解・マスクの形状が一致しません: {pred.shape}, {targets.shape}, {mask.shape}")
    if not mask.any():
        raise DataError("有効な正解画素がありません")
    return mask, pred[mask].astype(np.float64) - targets[mask].astype(np.float64)


def masked_mse(pred: np.ndarray, targets: np.ndarray, valid: np.ndarray) -> float:
    """有効画素だけの二乗誤差の平均"""
    _, residual = _valid_residuals(pred, targets, valid)
    return float(np.dot(residual, residual) / residual.size)


def weight_penalty(params: Dict[str, np.ndarray], weight_decay: float) -> float:
    """λ·(全学習パラメータの二乗平均)"""
    if weight_decay == 0.0:
        return 0.0
    total = sum(float(np.sum(np.square(v, dtype=np.float64))) for v in params.values())
    count = sum(v.size for v in params.values())
    return weight_decay * total / count


def loss(pred: np.ndarray, targets: np.ndarray, target_valid: np.ndarray,
         params: Dict[str, np.ndarray], weight_decay: float) -> float:
    """
    マスク付き二乗誤差 + 重み減衰

    Args:
        pred: N×1×H×W の予測
        targets: 正解（無効画素の値は無視）
        target_valid: 正解の有効マスク
        params: 学習パラメータ（γ, β, バイアスを含む）
        weight_decay: λ

    Raises:
        DataError: 有効画素がない
    """
    return masked_mse(pred, targets, target_valid) + weight_penalty(params, weight_decay)


def loss_and_grads(model: CanopyHeightModel, batch: PatchBatch, weight_decay: float,
                   mode: str = "train") -> Tuple[float, "Dict[str, np.ndarray]"]:
    """バッチの損失と全パラメータ勾配"""
    pred, tape = model.forward_with_tape(batch.inputs, mode)
    mask, residual = _valid_residuals(pred, batch.targets, batch.target_valid)
    value = float(np.dot(residual, residual) / residual.size)
    grad_pred = np.zeros_like(pred)
    grad_pred[mask] = (2.0 / residual.size) * residual
    grads = model.backward(grad_pred, tape)
    if weight_decay:
        value += weight_penalty(model.params, weight_decay)
        scale = 2.0 * weight_decay / model.count_params()
        for name, param in model.params.items():
            grads[name] = grads[name] + (scale * param).astype(grads[name].dtype)
    return value, grads


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """ADAM の1次・2次モーメントとステップ数"""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros(p.shape, dtype=np.float32) for k, p in params.items()},
                   {k: np.zeros(p.shape, dtype=np.float32) for k, p in params.items()})

    def as_moments(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {"m": self.m, "v": self.v}


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState, config: TrainConfig):
    """
    バイアス補正付き ADAM で params を更新する（params と state を書き換える）

    Raises:
        NumericError: 非有限の勾配（パラメータ名付き）
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError("非有限の勾配を検出しました", layer=name)
    state.t += 1
    correction1 = 1.0 - config.beta1 ** state.t
    correction2 = 1.0 - config.beta2 ** state.t
    for name, grad in grads.items():
        g = np.asarray(grad, dtype=np.float64)
        m = config.beta1 * state.m[name].astype(np.float64) + (1.0 - config.beta1) * g
        v = config.beta2 * state.v[name].astype(np.float64) + (1.0 - config.beta2) * g * g
        state.m[name] = m.astype(np.float32)
        state.v[name] = v.astype(np.float32)
        update = config.base_lr * (m / correction1) / (np.sqrt(v / correction2) + config.adam_eps)
        param = params[name]
        params[name] = (param.astype(np.float64) - update).astype(param.dtype)


# ---------------------------------------------------------------------------
# 学習ループ
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """学習の進行状態"""
    iteration: int = 0
    adam: Optional[AdamState] = None
    best_val_loss: float = math.inf
    best_iteration: int = 0
    history: List[Tuple[int, float, float]] = field(default_factory=list)
    best_model: Optional[CanopyHeightModel] = None

    def meta(self) -> Dict[str, Any]:
        return {
            "iteration": self.iteration,
            "adam_t": self.adam.t if self.adam else 0,
            "best_val_loss": None if math.isinf(self.best_val_loss) else self.best_val_loss,
            "best_iteration": self.best_iteration,
            "history": [list(row) for row in self.history],
        }

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "TrainState":
        """last.chkp から再開用の状態を復元"""
        meta = checkpoint.train_meta
        adam = None
        if checkpoint.moments is not None:
            adam = AdamState(dict(checkpoint.moments["m"]), dict(checkpoint.moments["v"]),
                             int(meta.get("adam_t", 0)))
        best = meta.get("best_val_loss")
        if best is not None and checkpoint.best_model is None:
            raise CheckpointFormatError("再開用の最良パラメータ (best.*) がありません。last.chkp を指定してください")
        return cls(
            iteration=int(meta.get("iteration", 0)),
            adam=adam,
            best_val_loss=math.inf if best is None else float(best),
            best_iteration=int(meta.get("best_iteration", 0)),
            history=[(int(r[0]), float(r[1]), float(r[2])) for r in meta.get("history", [])],
            best_model=checkpoint.best_model,
        )


@dataclass
class TrainResult:
    """学習結果"""
    best_model: CanopyHeightModel
    final_model: CanopyHeightModel
    state: TrainState
    curve: pd.DataFrame
    best_checkpoint: Optional[Path] = None
    curve_path: Optional[Path] = None

    @property
    def best_val_loss(self) -> Optional[float]:
        return None if math.isinf(self.state.best_val_loss) else self.state.best_val_loss


def loss_curve_frame(history: Iterable[Tuple[int, float, float]]) -> pd.DataFrame:
    return pd.DataFrame(list(history), columns=LOSS_CURVE_COLUMNS)


class Trainer:
    """学習ループ（パラメータ更新は常に1スレッド）"""

    def __init__(self, config: TrainConfig, logger: Optional[Logger] = None):
        config.validate()
        self.config = config
        self.logger = logger or get_default_logger()

    def step(self, model: CanopyHeightModel, batch: PatchBatch, state: TrainState) -> float:
        """1反復（順伝播・逆伝播・ADAM 更新）。損失を返す"""
        value, grads = loss_and_grads(model, batch, self.config.weight_decay)
        if not math.isfinite(value):
            raise NumericError(f"学習損失が非有限になりました: {value}", layer="loss")
        adam_step(model.params, grads, state.adam, self.config)
        return value

    def validation_loss(self, model: CanopyHeightModel, batch: PatchBatch, chunk: int = 256) -> float:
        """推論モード（移動平均統計）でのデータ項のみの損失"""
        total = 0.0
        count = 0
        for start in range(0, len(batch), chunk):
            part = batch.slice(start, start + chunk)
            if not part.target_valid.any():
                continue
            pred = model.forward(part.inputs, mode="infer")
            _, residual = _valid_residuals(pred, part.targets, part.target_valid)
            total += float(np.dot(residual, residual))
            count += residual.size
        if count == 0:
            raise DataError("検証パッチに有効画素がありません")
        return total / count

    def train(self, model: CanopyHeightModel, batches: Iterable[PatchBatch], val_batch: PatchBatch,
              out_dir: Optional[Path] = None, state: Optional[TrainState] = None) -> TrainResult:
        """
        max_iterations まで学習し、検証損失が最小のパラメータを返す

        Args:
            model: 学習するモデル（更新される）
            batches: 学習バッチの列
            val_batch: 固定の検証パッチ集合
            out_dir: チェックポイントと損失曲線の出力先（None なら書き出さない）
            state: 再開時の状態

        Raises:
            NumericError: 発散（out_dir があれば状態ダンプを書き出す）
        """
        config = self.config
        state = state or TrainState()
        if state.adam is None:
            state.adam = AdamState.zeros(model.params)
        best_model = state.best_model.copy() if state.best_model is not None else model.copy()
        window: List[float] = []
        start_iteration = state.iteration

        with self.logger.timed("学習"):
            batch_iter = iter(batches)
            while state.iteration < config.max_iterations:
                try:
                    batch = next(batch_iter)
                except StopIteration:
                    break
                try:
                    window.append(self.step(model, batch, state))
                except NumericError as e:
                    dump = self._dump(model, state, out_dir)
                    raise NumericError(f"学習が発散しました (iteration={state.iteration + 1}): {e}",
                                       layer=e.layer, dump_path=dump) from e
                state.iteration += 1

                if state.iteration % config.val_every == 0 or state.iteration == config.max_iterations:
                    val_loss = self.validation_loss(model, val_batch)
                    train_loss = float(np.mean(window))
                    window = []
                    state.history.append((state.iteration, train_loss, val_loss))
                    self.logger.log_metrics(f"iteration {state.iteration}", train_loss=train_loss,
                                            val_loss=val_loss)
                    if val_loss < state.best_val_loss:
                        state.best_val_loss = val_loss
                        state.best_iteration = state.iteration
                        best_model = state.best_model = model.copy()
                        self.logger.info(f"最良の検証損失を更新しました: {val_loss:.6g}")

        if state.iteration > start_iteration and math.isinf(state.best_val_loss):
            best_model = model.copy()
        state.best_model = best_model
        curve = loss_curve_frame(state.history)
        result = TrainResult(best_model, model, state, curve)
        if out_dir is not None:
            self._write_outputs(result, Path(out_dir))
        return result

    def _meta(self, state: TrainState, **extra) -> Dict[str, Any]:
        meta = state.meta()
        meta["train_config"] = asdict(self.config)
        meta.update(extra)
        return meta

    def _write_outputs(self, result: TrainResult, out_dir: Path):
        FileUtils.ensure_directory(out_dir)
        state = result.state
        result.best_checkpoint = save_checkpoint(
            result.best_model, self._meta(state, role="best", checkpoint_iteration=state.best_iteration),
            out_dir / BEST_CHECKPOINT)
        save_checkpoint(result.final_model, self._meta(state, role="last", checkpoint_iteration=state.iteration),
                        out_dir / LAST_CHECKPOINT, moments=state.adam.as_moments(), best=result.best_model)
        result.curve_path = out_dir / LOSS_CURVE
        FileUtils.write_text_file(result.curve_path, result.curve.to_csv(index=False, lineterminator="\n"))
        self.logger.log_operation("チェックポイント保存", str(result.best_checkpoint))

    def _dump(self, model: CanopyHeightModel, state: TrainState, out_dir: Optional[Path]) -> Optional[str]:
        if out_dir is None:
            return None
        path = FileUtils.ensure_directory(Path(out_dir)) / DIVERGENCE_DUMP
        try:
            save_checkpoint(model, self._meta(state, role="divergence_dump"), path,
                            moments=state.adam.as_moments(), best=state.best_model)
        except (OSError, ValueError) as e:
            self.logger.log_error(e, "状態ダンプの書き出しに失敗しました")
            return None
        return str(path)


# ---------------------------------------------------------------------------
# シーン単位の学習
# ---------------------------------------------------------------------------

@dataclass
class TrainingData:
    """シーンから組み立てた学習用データ"""
    subset: BandSubset
    stats: NormStats
    regions: Dict[str, np.ndarray]
    train_sampler: PatchSampler
    val_batch: PatchBatch


def prepare_training(cubes: Sequence[RasterCube], reference: HeightMap, setup: TrainSetup,
                     stats: Optional[NormStats] = None,
                     regions: Optional[Dict[str, np.ndarray]] = None) -> TrainingData:
    """
    領域分割・正規化統計量・サンプラー・固定検証集合を用意する

    Raises:
        MissingBandError: サブセットのバンドがキューブにない
        DataError: 適格なパッチ中心がない
    """
    setup.validate()
    subset = BandSubset.from_name(setup.data.band_subset)
    if regions is None:
        regions = split_regions(reference.shape, setup.data.split_fractions)
    elif set(regions) != {"train", "val", "test"}:
        raise ConfigError(f"領域は train / val / test の3つ: {sorted(regions)}")
    if stats is None:
        stats = compute_norm_stats(cubes, subset, setup.data.exclude_cloudy_stats,
                                   pixel_masks=[regions["train"]] * len(cubes))
    patch = dict(patch_size=setup.train.patch_size, max_cloudy_fraction=setup.train.max_cloudy_fraction)
    train_sampler = PatchSampler(cubes, reference, stats, subset, regions["train"], **patch)
    val_batch = sample_patches(cubes, reference, stats, setup.data.val_patches,
                               make_rng(setup.train.seed, "validation"), subset, regions["val"], **patch)
    return TrainingData(subset, stats, regions, train_sampler, val_batch)


def fit(cubes: Sequence[RasterCube], reference: HeightMap, setup: TrainSetup,
        out_dir: Optional[Path] = None, logger: Optional[Logger] = None,
        resume: Optional[Checkpoint] = None,
        regions: Optional[Dict[str, np.ndarray]] = None) -> Tuple[TrainResult, TrainingData]:
    """
    シーンからモデルを学習する

    Args:
        cubes: 撮影日ごとのキューブ
        reference: 参照樹高
        setup: 学習設定一式
        out_dir: 出力先
        logger: ロガー
        resume: 再開するチェックポイント（last.chkp）
        regions: train / val / test の領域マスク（None なら行方向の既定の分割）

    Returns:
        Tuple[TrainResult, TrainingData]: 学習結果と使用したデータ
    """
    logger = logger or get_default_logger()
    data = prepare_training(cubes, reference, setup, resume.model.norm_stats if resume else None, regions)
    state = None
    if resume is not None:
        model = resume.model
        if model.config.in_channels != len(data.subset):
            raise ShapeMismatchError(f"再開するモデルの入力チャンネル {model.config.in_channels} が "
                                     f"サブセット {data.subset.name} ({len(data.subset)}) と一致しません")
        state = TrainState.from_checkpoint(resume)
        logger.log_operation("学習再開", f"iteration={state.iteration}")
    else:
        model = CanopyHeightModel.build(setup.resolved_model(), data.stats)
    logger.log_operation("学習開始", f"bands={data.subset.name} params={model.count_params():,} "
                                    f"train_centers={len(data.train_sampler)}")

    rng = make_rng(setup.train.seed, f"sampler-{state.iteration if state else 0}")
    trainer = Trainer(setup.train, logger)
    with PatchPrefetcher(data.train_sampler, setup.train.batch_size, rng, setup.train.prefetch_depth) as batches:
        result = trainer.train(model, batches, data.val_batch, out_dir, state)
    return result, data
