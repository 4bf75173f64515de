# -*- coding: utf-8 -*-
"""
チェックポイント (.chkp) の保存・読み込み

形式（リトルエンディアン）:
    magic "CHKP" | version u16 | ヘッダー長 u32 | ヘッダー JSON (UTF-8) | テンソル本体 (float32)
ヘッダーには構成・テンソル目録（名前・形状・オフセット）・正規化統計量・学習メタ情報を持つ。
再開用の last.chkp は ADAM のモーメント (adam.m.*, adam.v.*) と最良パラメータ (best.*) も持つ。
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core import layers
from core.errors import CheckpointFormatError, ShapeMismatchError
from core.model import CanopyHeightModel, ModelConfig, param_shapes
from core.preprocess import NormStats
from utils.file_utils import FileUtils

CHECKPOINT_MAGIC = b"CHKP"
CHECKPOINT_VERSION = 1
PREFIX = struct.Struct("<4sHI")
TENSOR_DTYPE = "<f4"
BEST_PREFIX = "best."


@dataclass
class Checkpoint:
    """読み込んだチェックポイント"""
    model: CanopyHeightModel
    train_meta: Dict[str, Any] = field(default_factory=dict)
    moments: Optional[Dict[str, Dict[str, np.ndarray]]] = None
    best_model: Optional[CanopyHeightModel] = None


def _model_items(model: CanopyHeightModel, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
    items = [(f"{prefix}{name}", value) for name, value in model.params.items()]
    for name, state in model.bn_states.items():
        items.append((f"{prefix}{name}.running_mean", state.running_mean))
        items.append((f"{prefix}{name}.running_var", state.running_var))
    return items


def _tensor_items(model: CanopyHeightModel,
                  moments: Optional[Dict[str, Dict[str, np.ndarray]]],
                  best: Optional[CanopyHeightModel] = None) -> List[Tuple[str, np.ndarray]]:
    items = _model_items(model)
    if moments:
        for kind in ("m", "v"):
            items.extend((f"adam.{kind}.{name}", moments[kind][name]) for name in model.params)
    if best is not None:
        items.extend(_model_items(best, BEST_PREFIX))
    return items


def encode_checkpoint(model: CanopyHeightModel, train_meta: Dict[str, Any],
                      moments: Optional[Dict[str, Dict[str, np.ndarray]]] = None,
                      best: Optional[CanopyHeightModel] = None) -> bytes:
    """チェックポイントをバイト列へ（同じ内容なら同じバイト列）"""
    if best is not None and best.config != model.config:
        raise ShapeMismatchError("最良モデルの構成が保存するモデルと一致しません")
    directory = []
    payloads = []
    offset = 0
    for name, value in _tensor_items(model, moments, best):
        data = np.ascontiguousarray(value, dtype=TENSOR_DTYPE).tobytes(order="C")
        directory.append({"name": name, "shape": list(np.shape(value)), "offset": offset,
                          "nbytes": len(data), "dtype": TENSOR_DTYPE})
        payloads.append(data)
        offset += len(data)
    header = {
        "config": model.config.to_dict(),
        "norm_stats": model.norm_stats.to_dict() if model.norm_stats is not None else None,
        "train_meta": train_meta,
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + b"".join(payloads)


def save_checkpoint(model: CanopyHeightModel, train_meta: Dict[str, Any], path: Path,
                    moments: Optional[Dict[str, Dict[str, np.ndarray]]] = None,
                    best: Optional[CanopyHeightModel] = None) -> Path:
    """
    チェックポイントを書き出す

    Args:
        model: 保存するモデル（正規化統計量を含む）
        train_meta: 反復回数・最良検証損失などの学習メタ情報
        path: 出力パス
        moments: ADAM のモーメント {"m": {...}, "v": {...}}（再開用）
        best: これまでの最良モデル（再開用。model と同じ構成）
    """
    path = Path(path)
    FileUtils.write_bytes_atomic(path, encode_checkpoint(model, train_meta, moments, best))
    return path


def decode_checkpoint(payload: bytes, expected_in_channels: Optional[int] = None) -> Checkpoint:
    """バイト列からチェックポイントを復元"""
    if len(payload) < PREFIX.size:
        raise CheckpointFormatError("ヘッダーが途中で切れています", offset=len(payload))
    magic, version, header_len = PREFIX.unpack_from(payload, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"マジックバイトが一致しません: {magic!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"未対応のバージョンです: {version} (対応: {CHECKPOINT_VERSION})", offset=4)
    body_start = PREFIX.size + header_len
    if body_start > len(payload):
        raise CheckpointFormatError("ヘッダー JSON が途中で切れています", offset=PREFIX.size)
    try:
        header = json.loads(payload[PREFIX.size:body_start].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"ヘッダーを解析できません: {e}", offset=PREFIX.size) from e

    if expected_in_channels is not None and config.in_channels != expected_in_channels:
        raise ShapeMismatchError(f"チェックポイントの入力チャンネル数 {config.in_channels} が "
                                 f"期待値 {expected_in_channels} と一致しません")
    norm_stats = NormStats.from_dict(header["norm_stats"]) if header.get("norm_stats") else None
    model = CanopyHeightModel.zeros(config, norm_stats)

    tensors: Dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        start = body_start + int(entry["offset"])
        end = start + int(entry["nbytes"])
        if end > len(payload):
            raise CheckpointFormatError(f"テンソル {entry['name']} の途中でデータが切れています", offset=start)
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        array = np.frombuffer(payload, dtype=entry["dtype"], count=count, offset=start)
        tensors[entry["name"]] = array.reshape(entry["shape"]).astype(np.float32)

    expected = param_shapes(config)
    _fill_model(model, tensors, expected)

    moments = None
    if all(f"adam.m.{name}" in tensors for name in expected):
        moments = {kind: {name: tensors[f"adam.{kind}.{name}"] for name in expected} for kind in ("m", "v")}
    best = None
    if any(name.startswith(BEST_PREFIX) for name in tensors):
        best = CanopyHeightModel.zeros(config, norm_stats)
        _fill_model(best, tensors, expected, BEST_PREFIX)
    return Checkpoint(model, dict(header.get("train_meta") or {}), moments, best)


def _fill_model(model: CanopyHeightModel, tensors: Dict[str, np.ndarray],
                expected: Dict[str, Tuple[int, ...]], prefix: str = ""):
    for name, shape in expected.items():
        key = f"{prefix}{name}"
        if key not in tensors:
            raise CheckpointFormatError(f"パラメータ {key} がありません")
        if tensors[key].shape != tuple(shape):
            raise ShapeMismatchError(f"パラメータ {key} の形状 {tensors[key].shape} が構成 {shape} と一致しません")
        model.params[name] = tensors[key]
    for name in model.bn_states:
        try:
            model.bn_states[name] = layers.BatchNormState(tensors[f"{prefix}{name}.running_mean"],
                                                          tensors[f"{prefix}{name}.running_var"])
        except KeyError as e:
            raise CheckpointFormatError(f"バッチ正規化統計がありません: {e}") from e


def load_checkpoint(path: Path, expected_in_channels: Optional[int] = None) -> Checkpoint:
    """
    チェックポイントを読み込む

    Raises:
        CheckpointFormatError: マジック・バージョン・本体の不整合
        ShapeMismatchError: 入力チャンネル数・テンソル形状の不一致
    """
    return decode_checkpoint(Path(path).read_bytes(), expected_in_channels)
