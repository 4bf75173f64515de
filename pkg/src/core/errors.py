# -*- coding: utf-8 -*-
"""
例外クラス定義

ライブラリ側は例外を送出するだけで、終了コードへの変換は app.py が行う。
"""

from typing import Optional, Any


class CanopyError(Exception):
    """ツールキット共通の基底例外"""

    exit_code = 1


class ConfigError(CanopyError):
    """設定ファイル・引数の誤り"""

    exit_code = 2


class NumericError(CanopyError):
    """数値計算の破綻（非有限値、発散など）"""

    exit_code = 3

    def __init__(self, message: str, layer: Optional[str] = None,
                 dump_path: Optional[str] = None):
        """
        初期化

        Args:
            message: エラーメッセージ
            layer: 問題が検出された層・パラメータ名
            dump_path: 状態ダンプの保存先
        """
        self.layer = layer
        self.dump_path = dump_path
        detail = message
        if layer:
            detail += f" (layer={layer})"
        if dump_path:
            detail += f" (dump={dump_path})"
        super().__init__(detail)


class DataError(CanopyError):
    """入力データの不整合"""

    exit_code = 4


class ShapeMismatchError(DataError):
    """テンソル形状・チャンネル数の不一致"""


class MissingBandError(DataError):
    """必要なバンドがキューブに存在しない"""

    def __init__(self, missing: list, available: list):
        self.missing = list(missing)
        self.available = list(available)
        super().__init__(f"バンドが見つかりません: {', '.join(self.missing)} "
                         f"(利用可能: {', '.join(self.available)})")


class RasterFormatError(DataError):
    """ラスタコンテナの解析エラー"""

    def __init__(self, message: str, offset: int,
                 expected: Any = None, actual: Any = None):
        """
        初期化

        Args:
            message: エラー内容
            offset: 問題のあったバイトオフセット
            expected: 期待値（長さ・マジックなど）
            actual: 実際の値
        """
        self.offset = offset
        self.expected = expected
        self.actual = actual
        detail = f"{message} (offset={offset}"
        if expected is not None or actual is not None:
            detail += f", expected={expected}, actual={actual}"
        detail += ")"
        super().__init__(detail)


class CheckpointFormatError(DataError):
    """チェックポイントの解析エラー"""

    def __init__(self, message: str, offset: int = -1):
        self.offset = offset
        super().__init__(f"{message} (offset={offset})" if offset >= 0 else message)
