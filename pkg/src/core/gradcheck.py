# -*- coding: utf-8 -*-
"""
有限差分による勾配検証

スカラー化には固定乱数の射影 Σ R⊙f(x) を使い、中心差分（float64）と
解析的勾配をテンソルごとの相対誤差 ‖a−n‖ / max(‖a‖, ‖n‖) で比較する。
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from core import layers

Inputs = Dict[str, np.ndarray]


@dataclass
class GradCheckOp:
    """検証対象の演算（順伝播と、出力勾配から入力・パラメータ勾配を返す逆伝播）"""
    name: str
    forward: Callable[[Inputs], np.ndarray]
    backward: Callable[[Inputs, np.ndarray], Dict[str, np.ndarray]]


@dataclass
class GradCheckResult:
    """検証結果"""
    max_relative_error: float
    per_tensor: Dict[str, float] = field(default_factory=dict)

    def worst(self) -> str:
        return max(self.per_tensor, key=self.per_tensor.get) if self.per_tensor else ""


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """‖a−n‖ / max(‖a‖, ‖n‖)。両方ゼロなら 0"""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-300:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def finite_diff_check(op: GradCheckOp, inputs: Inputs, eps: float = 1e-6,
                      seed: int = 0, max_elements: int = 4096) -> GradCheckResult:
    """
    中心差分で逆伝播を検証する

    Args:
        op: 検証する演算
        inputs: 入力・パラメータ（float64 に変換して使う）
        eps: 差分幅
        seed: 射影 R の乱数シード
        max_elements: テンソルあたりの要素数上限

    Returns:
        GradCheckResult: 最悪ケースの相対誤差とテンソル別の誤差
    """
    values = {name: np.array(v, dtype=np.float64, copy=True) for name, v in inputs.items()}
    for name, value in values.items():
        if value.size > max_elements:
            raise ValueError(f"{name} が大きすぎます ({value.size} 要素 > {max_elements})")

    out = np.asarray(op.forward(values), dtype=np.float64)
    rng = np.random.default_rng(seed)
    projection = rng.standard_normal(out.shape) if out.ndim else np.float64(1.0)
    analytic = op.backward(values, np.asarray(projection, dtype=np.float64))

    def objective() -> float:
        return float(np.sum(np.asarray(op.forward(values), dtype=np.float64) * projection))

    per_tensor = {}
    for name, grad in analytic.items():
        if grad is None:
            continue
        target = values[name]
        numeric = np.zeros_like(target)
        flat = target.reshape(-1)
        numeric_flat = numeric.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            f_plus = objective()
            flat[i] = original - eps
            f_minus = objective()
            flat[i] = original
            numeric_flat[i] = (f_plus - f_minus) / (2.0 * eps)
        per_tensor[name] = relative_error(np.asarray(grad, dtype=np.float64), numeric)

    worst = max(per_tensor.values()) if per_tensor else 0.0
    return GradCheckResult(worst, per_tensor)


# ---------------------------------------------------------------------------
# 各層の検証用ラッパー
# ---------------------------------------------------------------------------

def pointwise_op(with_bias: bool = True) -> GradCheckOp:
    def forward(v: Inputs) -> np.ndarray:
        return layers.conv_pointwise_forward(v["x"], v["w"], v["b"] if with_bias else None)[0]

    def backward(v: Inputs, grad: np.ndarray) -> Dict[str, np.ndarray]:
        _, cache = layers.conv_pointwise_forward(v["x"], v["w"], v["b"] if with_bias else None)
        dx, dw, db = layers.conv_pointwise_backward(grad, cache)
        grads = {"x": dx, "w": dw}
        if with_bias:
            grads["b"] = db
        return grads

    return GradCheckOp("conv_pointwise", forward, backward)


def depthwise_op() -> GradCheckOp:
    def forward(v: Inputs) -> np.ndarray:
        return layers.conv_depthwise_forward(v["x"], v["w"])[0]

    def backward(v: Inputs, grad: np.ndarray) -> Dict[str, np.ndarray]:
        _, cache = layers.conv_depthwise_forward(v["x"], v["w"])
        dx, dw = layers.conv_depthwise_backward(grad, cache)
        return {"x": dx, "w": dw}

    return GradCheckOp("conv_depthwise", forward, backward)


def relu_op() -> GradCheckOp:
    def forward(v: Inputs) -> np.ndarray:
        return layers.relu_forward(v["x"])[0]

    def backward(v: Inputs, grad: np.ndarray) -> Dict[str, np.ndarray]:
        _, mask = layers.relu_forward(v["x"])
        return {"x": layers.relu_backward(grad, mask)}

    return GradCheckOp("relu", forward, backward)


def batchnorm_op(training: bool = True) -> GradCheckOp:
    def run(v: Inputs):
        state = layers.BatchNormState.fresh(v["x"].shape[1], dtype=np.float64)
        return layers.batchnorm_forward(v["x"], v["gamma"], v["beta"], state, training)

    def forward(v: Inputs) -> np.ndarray:
        return run(v)[0]

    def backward(v: Inputs, grad: np.ndarray) -> Dict[str, np.ndarray]:
        _, cache = run(v)
        dx, dgamma, dbeta = layers.batchnorm_backward(grad, cache)
        return {"x": dx, "gamma": dgamma, "beta": dbeta}

    return GradCheckOp("batchnorm", forward, backward)


def residual_op() -> GradCheckOp:
    def forward(v: Inputs) -> np.ndarray:
        return layers.add_residual_forward(v["x"], v["skip"])

    def backward(v: Inputs, grad: np.ndarray) -> Dict[str, np.ndarray]:
        dx, dskip = layers.add_residual_backward(grad)
        return {"x": dx, "skip": dskip}

    return GradCheckOp("add_residual", forward, backward)


def scaled_backward(op: GradCheckOp, factor: float, name: Optional[str] = None) -> GradCheckOp:
    """逆伝播を意図的に歪めた演算（検証器の感度確認用）"""
    def backward(v: Inputs, grad: np.ndarray) -> Dict[str, np.ndarray]:
        return {k: g * factor for k, g in op.backward(v, grad).items()}

    return GradCheckOp(name or f"{op.name}_scaled", op.forward, backward)
