# -*- coding: utf-8 -*-
"""
樹高回帰モデル

エントリーブロック（ポイントワイズ畳み込み3層＋学習スキップ）→
SepConv 残差ブロック × n_blocks → ヘッド（幅→1）の全層畳み込みネットワーク。
パラメータは名前付きの順序付き辞書で保持する。
"""

from collections import OrderedDict
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Tuple, Any

import numpy as np

from core import layers
from core.errors import ConfigError, NumericError, ShapeMismatchError
from core.preprocess import NormStats
from utils.random_utils import make_rng

REFERENCE_PARAM_COUNT = 19_604_225
KERNEL_MODES = {"3x3": 3, "1x1": 1}


@dataclass(frozen=True)
class ModelConfig:
    """モデル構成"""
    in_channels: int = 13
    trunk_width: int = 728
    n_blocks: int = 18
    entry_depths: Tuple[int, ...] = (128, 364)
    kernel_mode: str = "3x3"
    seed: int = 1

    def validate(self):
        """構成の検査（不正なら ConfigError）"""
        if self.in_channels < 1:
            raise ConfigError(f"in_channels は1以上: {self.in_channels}")
        if self.trunk_width < 1:
            raise ConfigError(f"trunk_width は正: {self.trunk_width}")
        if self.n_blocks < 1:
            raise ConfigError(f"n_blocks は1以上: {self.n_blocks}")
        if self.kernel_mode not in KERNEL_MODES:
            raise ConfigError(f"kernel_mode は {', '.join(KERNEL_MODES)} のいずれか: {self.kernel_mode}")
        depths = list(self.entry_depths) + [self.trunk_width]
        if len(self.entry_depths) != 2:
            raise ConfigError(f"entry_depths は2要素: {self.entry_depths}")
        if depths[0] < 1 or any(a >= b for a, b in zip(depths, depths[1:])):
            raise ConfigError(f"entry_depths は trunk_width に向かって狭義単調増加である必要があります: "
                              f"{self.entry_depths} → {self.trunk_width}")

    @property
    def kernel_size(self) -> int:
        return KERNEL_MODES[self.kernel_mode]

    @property
    def receptive_radius(self) -> int:
        """受容野の半径（チェビシェフ距離, px）"""
        return 2 * self.n_blocks * (self.kernel_size // 2)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["entry_depths"] = list(self.entry_depths)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        data = dict(data)
        data["entry_depths"] = tuple(data.get("entry_depths", cls.entry_depths))
        return cls(**data)


def param_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """パラメータ名 → 形状（順序固定）"""
    c_in, width = config.in_channels, config.trunk_width
    d1, d2 = config.entry_depths
    k = config.kernel_size
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    for name, c_out, c_prev in (("entry.conv1", d1, c_in), ("entry.conv2", d2, d1),
                                ("entry.conv3", width, d2), ("entry.skip", width, c_in)):
        shapes[f"{name}.w"] = (c_out, c_prev)
        shapes[f"{name}.b"] = (c_out,)
    for block in block_names(config):
        for unit in (1, 2):
            prefix = f"{block}.sep{unit}"
            shapes[f"{prefix}.dw"] = (width, k, k)
            shapes[f"{prefix}.pw.w"] = (width, width)
            shapes[f"{prefix}.pw.b"] = (width,)
            shapes[f"{prefix}.bn.gamma"] = (width,)
            shapes[f"{prefix}.bn.beta"] = (width,)
    shapes["head.w"] = (1, width)
    shapes["head.b"] = (1,)
    return shapes


def block_names(config: ModelConfig) -> List[str]:
    return [f"block{b:02d}" for b in range(1, config.n_blocks + 1)]


def _fan_in(name: str, shape: Tuple[int, ...]) -> Optional[int]:
    if name.endswith(".dw"):
        return shape[1] * shape[2]
    if name.endswith(".w"):
        return shape[1]
    return None


@dataclass
class ParamReport:
    """パラメータ数の内訳"""
    total: int
    breakdown: Dict[str, int]
    reference: int = REFERENCE_PARAM_COUNT
    entry_depths: Tuple[int, ...] = ()

    @property
    def deviation(self) -> int:
        return self.total - self.reference

    @property
    def deviation_ratio(self) -> float:
        return self.deviation / self.reference

    def to_dict(self) -> Dict[str, Any]:
        return {
            "total": self.total,
            "breakdown": dict(self.breakdown),
            "reference": self.reference,
            "deviation": self.deviation,
            "deviation_percent": round(100.0 * self.deviation_ratio, 4),
            "entry_depths": list(self.entry_depths),
        }

    def lines(self) -> List[str]:
        out = [f"{name:<12s} {count:>12,d}" for name, count in self.breakdown.items()]
        out.append(f"{'total':<12s} {self.total:>12,d}")
        out.append(f"{'reference':<12s} {self.reference:>12,d}")
        out.append(f"deviation    {self.deviation:+,d} ({100.0 * self.deviation_ratio:+.3f}%) "
                   f"entry_depths={tuple(self.entry_depths)}")
        return out


class CanopyHeightModel:
    """樹高回帰モデル（パラメータ・バッチ正規化統計・正規化統計量を保持）"""

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, np.ndarray]",
                 bn_states: Dict[str, layers.BatchNormState],
                 norm_stats: Optional[NormStats] = None):
        self.config = config
        self.params = params
        self.bn_states = bn_states
        self.norm_stats = norm_stats

    @classmethod
    def build(cls, config: ModelConfig, norm_stats: Optional[NormStats] = None) -> "CanopyHeightModel":
        """
        パラメータを初期化して構築する（同じ seed なら同一）

        畳み込み重みは分散 2/fan_in の正規分布、バイアス 0、γ=1、β=0。
        """
        config.validate()
        rng = make_rng(config.seed, "init")
        params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, shape in param_shapes(config).items():
            fan_in = _fan_in(name, shape)
            if fan_in is not None:
                value = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            elif name.endswith(".gamma"):
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            params[name] = value.astype(np.float32)
        return cls(config, params, cls._fresh_bn_states(config), norm_stats)

    @classmethod
    def zeros(cls, config: ModelConfig, norm_stats: Optional[NormStats] = None) -> "CanopyHeightModel":
        """全パラメータ 0 のモデル（読み込み用の器）"""
        config.validate()
        params = OrderedDict((name, np.zeros(shape, dtype=np.float32))
                             for name, shape in param_shapes(config).items())
        return cls(config, params, cls._fresh_bn_states(config), norm_stats)

    @staticmethod
    def _fresh_bn_states(config: ModelConfig) -> Dict[str, layers.BatchNormState]:
        return {f"{block}.sep{unit}.bn": layers.BatchNormState.fresh(config.trunk_width)
                for block in block_names(config) for unit in (1, 2)}

    def copy(self) -> "CanopyHeightModel":
        params = OrderedDict((k, v.copy()) for k, v in self.params.items())
        states = {k: layers.BatchNormState(s.running_mean.copy(), s.running_var.copy())
                  for k, s in self.bn_states.items()}
        return CanopyHeightModel(self.config, params, states, self.norm_stats)

    def with_params(self, params: Dict[str, np.ndarray]) -> "CanopyHeightModel":
        """パラメータだけを差し替えた浅いコピー（統計は共有）"""
        merged = OrderedDict((k, params.get(k, v)) for k, v in self.params.items())
        return CanopyHeightModel(self.config, merged, self.bn_states, self.norm_stats)

    # ------------------------------------------------------------------
    # パラメータ数
    # ------------------------------------------------------------------

    def count_params(self) -> int:
        """学習対象パラメータの総数（γ, β を含み、移動平均統計は含まない）"""
        return int(sum(v.size for v in self.params.values()))

    def param_report(self) -> ParamReport:
        return _param_report(self.config, ((k, v.shape) for k, v in self.params.items()))

    # ------------------------------------------------------------------
    # 順伝播・逆伝播
    # ------------------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "infer") -> np.ndarray:
        """
        順伝播

        Args:
            x: N×C×H×W（C = in_channels）
            mode: "train"（バッチ統計）または "infer"（移動平均統計）

        Returns:
            np.ndarray: N×1×H×W
        """
        return self._run(x, mode, record=False)[0]

    def forward_with_tape(self, x: np.ndarray, mode: str = "train") -> Tuple[np.ndarray, Dict[str, Any]]:
        """逆伝播用のキャッシュ付き順伝播"""
        return self._run(x, mode, record=True)

    def _run(self, x: np.ndarray, mode: str, record: bool) -> Tuple[np.ndarray, Dict[str, Any]]:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode は train / infer: {mode}")
        training = mode == "train"
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeMismatchError(f"入力チャンネル数がモデルと一致しません: 入力 {x.shape}, "
                                     f"モデル {self.config.in_channels}")
        p = self.params
        tape: Dict[str, Any] = {}

        def keep(name: str, cache):
            if record:
                tape[name] = cache

        h, cache = layers.conv_pointwise_forward(x, p["entry.conv1.w"], p["entry.conv1.b"])
        keep("entry.conv1", cache)
        h, mask = layers.relu_forward(h)
        keep("entry.relu1", mask)
        h, cache = layers.conv_pointwise_forward(h, p["entry.conv2.w"], p["entry.conv2.b"])
        keep("entry.conv2", cache)
        h, mask = layers.relu_forward(h)
        keep("entry.relu2", mask)
        h, cache = layers.conv_pointwise_forward(h, p["entry.conv3.w"], p["entry.conv3.b"])
        keep("entry.conv3", cache)
        skip, cache = layers.conv_pointwise_forward(x, p["entry.skip.w"], p["entry.skip.b"])
        keep("entry.skip", cache)
        h = layers.add_residual_forward(h, skip)
        self._check_finite(h, "entry")

        for block in block_names(self.config):
            u = h
            for unit in (1, 2):
                prefix = f"{block}.sep{unit}"
                u, mask = layers.relu_forward(u)
                keep(f"{prefix}.relu", mask)
                u, cache = layers.conv_depthwise_forward(u, p[f"{prefix}.dw"])
                keep(f"{prefix}.dw", cache)
                u, cache = layers.conv_pointwise_forward(u, p[f"{prefix}.pw.w"], p[f"{prefix}.pw.b"])
                keep(f"{prefix}.pw", cache)
                u, cache = layers.batchnorm_forward(u, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"],
                                                    self.bn_states[f"{prefix}.bn"], training)
                keep(f"{prefix}.bn", cache)
                self._check_finite(u, prefix)
            h = layers.add_residual_forward(u, h)

        out, cache = layers.conv_pointwise_forward(h, p["head.w"], p["head.b"])
        keep("head", cache)
        self._check_finite(out, "head")
        return out, tape

    @staticmethod
    def _check_finite(x: np.ndarray, layer: str):
        if not np.all(np.isfinite(x)):
            raise NumericError("非有限の活性値を検出しました", layer=layer)

    def backward(self, grad_out: np.ndarray, tape: Dict[str, Any]) -> "OrderedDict[str, np.ndarray]":
        """
        出力勾配から全パラメータの勾配を計算する

        Returns:
            OrderedDict[str, np.ndarray]: params と同じ順序・形状の勾配
        """
        grads: Dict[str, np.ndarray] = {}
        g, grads["head.w"], grads["head.b"] = layers.conv_pointwise_backward(grad_out, tape["head"])

        for block in reversed(block_names(self.config)):
            g_skip = g
            u = g
            for unit in (2, 1):
                prefix = f"{block}.sep{unit}"
                u, grads[f"{prefix}.bn.gamma"], grads[f"{prefix}.bn.beta"] = \
                    layers.batchnorm_backward(u, tape[f"{prefix}.bn"])
                u, grads[f"{prefix}.pw.w"], grads[f"{prefix}.pw.b"] = \
                    layers.conv_pointwise_backward(u, tape[f"{prefix}.pw"])
                u, grads[f"{prefix}.dw"] = layers.conv_depthwise_backward(u, tape[f"{prefix}.dw"])
                u = layers.relu_backward(u, tape[f"{prefix}.relu"])
            g = u + g_skip

        g_main, g_skip = layers.add_residual_backward(g)
        _, grads["entry.skip.w"], grads["entry.skip.b"] = \
            layers.conv_pointwise_backward(g_skip, tape["entry.skip"])
        g, grads["entry.conv3.w"], grads["entry.conv3.b"] = \
            layers.conv_pointwise_backward(g_main, tape["entry.conv3"])
        g = layers.relu_backward(g, tape["entry.relu2"])
        g, grads["entry.conv2.w"], grads["entry.conv2.b"] = \
            layers.conv_pointwise_backward(g, tape["entry.conv2"])
        g = layers.relu_backward(g, tape["entry.relu1"])
        _, grads["entry.conv1.w"], grads["entry.conv1.b"] = \
            layers.conv_pointwise_backward(g, tape["entry.conv1"])

        return OrderedDict((name, grads[name]) for name in self.params)


def config_param_report(config: ModelConfig) -> ParamReport:
    """構成からパラメータ数を数える（重みは確保しない）"""
    config.validate()
    return _param_report(config, param_shapes(config).items())


def full_size_report(entry_depths: Tuple[int, ...] = (128, 364), in_channels: int = 13) -> ParamReport:
    """幅 728・18ブロックの全規模構成のパラメータ数"""
    return config_param_report(ModelConfig(in_channels=in_channels, entry_depths=tuple(entry_depths)))


def _param_report(config: ModelConfig, shapes) -> ParamReport:
    breakdown = {"entry": 0, "blocks": 0, "head": 0}
    for name, shape in shapes:
        part = name.split(".")[0]
        key = "blocks" if part.startswith("block") else part
        breakdown[key] += int(np.prod(shape))
    return ParamReport(sum(breakdown.values()), breakdown, entry_depths=config.entry_depths)
