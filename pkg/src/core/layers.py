# -*- coding: utf-8 -*-
"""
層の順伝播・逆伝播

ネットワークが使う層だけを実装する: ポイントワイズ畳み込み、デプスワイズ畳み込み、
ReLU、バッチ正規化、残差加算。テンソルは N×C×H×W。
各 forward は (出力, キャッシュ) を返し、対応する backward がキャッシュから勾配を計算する。
畳み込みは相互相関（カーネル反転なし）、ストライド1、同サイズになるようゼロパディング。
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Any

import numpy as np

from core.errors import ShapeMismatchError

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


def _check_4d(x: np.ndarray, name: str = "x"):
    if x.ndim != 4:
        raise ShapeMismatchError(f"{name} は N×C×H×W である必要があります: shape={x.shape}")


# ---------------------------------------------------------------------------
# ポイントワイズ畳み込み (1×1)
# ---------------------------------------------------------------------------

def conv_pointwise_forward(x: np.ndarray, w: np.ndarray,
                           b: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Any]:
    """
    out[n,o,h,w] = b[o] + Σ_i w[o,i]·x[n,i,h,w]

    Args:
        x: N×Cin×H×W
        w: Cout×Cin
        b: Cout（None ならバイアスなし）
    """
    _check_4d(x)
    n, c_in, height, width = x.shape
    if w.ndim != 2 or w.shape[1] != c_in:
        raise ShapeMismatchError(f"重み {w.shape} が入力チャンネル {c_in} と一致しません")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeMismatchError(f"バイアス {b.shape} が出力チャンネル {w.shape[0]} と一致しません")
    flat = x.reshape(n, c_in, height * width)
    out = np.matmul(w, flat)
    if b is not None:
        out += b[np.newaxis, :, np.newaxis]
    out = out.reshape(n, w.shape[0], height, width)
    return out, (flat, w, b is not None, x.shape)


def conv_pointwise_backward(grad: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """
    Returns:
        (dx, dw, db)。バイアスなしなら db は None
    """
    flat, w, has_bias, x_shape = cache
    n, c_out = grad.shape[:2]
    g = grad.reshape(n, c_out, -1)
    dw = np.tensordot(g, flat, axes=([0, 2], [0, 2])).astype(w.dtype, copy=False)
    db = g.sum(axis=(0, 2), dtype=np.float64).astype(w.dtype) if has_bias else None
    dx = np.matmul(w.T, g).reshape(x_shape)
    return dx, dw, db


# ---------------------------------------------------------------------------
# デプスワイズ畳み込み (k×k, チャンネルごと)
# ---------------------------------------------------------------------------

def conv_depthwise_forward(x: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, Any]:
    """
    チャンネルごとの2次元相互相関（k は奇数、パディング k//2、ストライド1）

    Args:
        x: N×C×H×W
        w: C×k×k
    """
    _check_4d(x)
    n, channels, height, width = x.shape
    if w.ndim != 3 or w.shape[0] != channels or w.shape[1] != w.shape[2] or w.shape[1] % 2 == 0:
        raise ShapeMismatchError(f"デプスワイズ重み {w.shape} が入力 {x.shape} と合いません")
    k = w.shape[1]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            out += w[np.newaxis, :, i, j, np.newaxis, np.newaxis] * xp[:, :, i:i + height, j:j + width]
    if out.shape != x.shape:
        raise ShapeMismatchError(f"空間サイズが保存されていません: {x.shape} → {out.shape}")
    return out, (xp, w, x.shape)


def conv_depthwise_backward(grad: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray]:
    """Returns: (dx, dw)"""
    xp, w, x_shape = cache
    _, _, height, width = x_shape
    k = w.shape[1]
    pad = k // 2
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            window = xp[:, :, i:i + height, j:j + width]
            dw[:, i, j] = (grad * window).sum(axis=(0, 2, 3), dtype=np.float64)
            dxp[:, :, i:i + height, j:j + width] += w[np.newaxis, :, i, j, np.newaxis, np.newaxis] * grad
    dx = dxp[:, :, pad:pad + height, pad:pad + width] if pad else dxp
    return dx, dw


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """max(0, x)。0 での劣勾配は 0"""
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(grad: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, grad, 0).astype(grad.dtype, copy=False)


# ---------------------------------------------------------------------------
# バッチ正規化
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """移動平均統計量（学習対象外）"""
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      state: BatchNormState, training: bool,
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tuple[np.ndarray, Any]:
    """
    バッチ正規化

    学習時はチャンネルごとに N·H·W 画素のバッチ統計量（float64 で集計）を使い、
    移動平均を momentum で更新する。推論時は移動平均を使う。
    """
    _check_4d(x)
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeMismatchError(f"γ/β の形状 {gamma.shape}/{beta.shape} がチャンネル {channels} と一致しません")
    shape = (1, channels, 1, 1)
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count <= 1:
            raise ShapeMismatchError("学習モードのバッチ正規化には2画素以上が必要です")
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.var(axis=(0, 2, 3), dtype=np.float64)
        state.running_mean[...] = momentum * state.running_mean + (1.0 - momentum) * mean
        state.running_var[...] = momentum * state.running_var + (1.0 - momentum) * var
    else:
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype).reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, inv_std, gamma, training)


def batchnorm_backward(grad: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns: (dx, dγ, dβ)"""
    xhat, inv_std, gamma, training = cache
    shape = (1, gamma.shape[0], 1, 1)
    dgamma = (grad * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(gamma.dtype)
    dbeta = grad.sum(axis=(0, 2, 3), dtype=np.float64).astype(gamma.dtype)
    dxhat = grad * gamma.reshape(shape)
    if not training:
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    count = grad.shape[0] * grad.shape[2] * grad.shape[3]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3), dtype=np.float64).astype(grad.dtype).reshape(shape)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(grad.dtype).reshape(shape)
    dx = (inv_std.reshape(shape) / count) * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# 残差加算
# ---------------------------------------------------------------------------

def add_residual_forward(x: np.ndarray, skip: np.ndarray) -> np.ndarray:
    if x.shape != skip.shape:
        raise ShapeMismatchError(f"残差の形状が一致しません: {x.shape} / {skip.shape}")
    return x + skip


def add_residual_backward(grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """勾配は両方の経路へそのまま流れる"""
    return grad, grad


def separable_saving_factor(channels: int, kernel: int = 3) -> float:
    """
    密な k×k 畳み込み (C→C) に対するデプスワイズ分離畳み込みのパラメータ削減率

    k²·C² / (k²·C + C²)。C=728 でおよそ 9。
    """
    dense = kernel * kernel * channels * channels
    separable = kernel * kernel * channels + channels * channels
    return dense / separable
