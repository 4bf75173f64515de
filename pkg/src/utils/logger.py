# -*- coding: utf-8 -*-
"""
ログ機能クラス
"""

import logging
import logging.handlers
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

LOGGER_NAME = "CanopyHeight"


class Logger:
    """ツールキットのログ管理クラス"""

    def __init__(self, log_file: Optional[Path] = None, level: str = "INFO",
                 name: str = LOGGER_NAME):
        """
        初期化

        Args:
            log_file: ログファイルパス
            level: ログレベル
            name: ロガー名
        """
        self.log_file = log_file
        self.level = level
        self.logger = logging.getLogger(name)

        # ログレベルを設定
        numeric_level = getattr(logging, level.upper(), logging.INFO)
        self.logger.setLevel(numeric_level)

        # 既存のハンドラーをクリア
        self.logger.handlers.clear()
        self.logger.propagate = False  # ルートロガーへ二重出力しない

        # フォーマッターを設定
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )

        # コンソールハンドラーを追加
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        self.logger.addHandler(console_handler)

        # ファイルハンドラーを追加（指定されている場合）
        if log_file:
            self._setup_file_handler(log_file, formatter)

    def _setup_file_handler(self, log_file: Path, formatter: logging.Formatter):
        """ファイルハンドラーを設定"""
        try:
            # ログディレクトリを作成
            log_file.parent.mkdir(parents=True, exist_ok=True)

            # 最大10MB、バックアップ5個
            file_handler = logging.handlers.RotatingFileHandler(
                log_file,
                maxBytes=10 * 1024 * 1024,  # 10MB
                backupCount=5,
                encoding='utf-8'
            )
            file_handler.setFormatter(formatter)
            self.logger.addHandler(file_handler)

        except OSError as e:
            self.logger.error(f"ファイルハンドラーの設定に失敗しました: {e}")

    def child(self, suffix: str) -> "Logger":
        """同じハンドラー設定を共有する子ロガーを返す"""
        child = Logger.__new__(Logger)
        child.log_file = self.log_file
        child.level = self.level
        child.logger = self.logger.getChild(suffix)  # ハンドラーは親へ伝播
        return child

    def debug(self, message: str):
        self.logger.debug(message)

    def info(self, message: str):
        self.logger.info(message)

    def warning(self, message: str):
        self.logger.warning(message)

    def error(self, message: str):
        self.logger.error(message)

    def critical(self, message: str):
        self.logger.critical(message)

    def log_operation(self, operation: str, details: str = ""):
        """操作ログを出力"""
        message = operation
        if details:
            message += f" - {details}"
        self.info(message)

    def log_warning(self, message: str):
        """警告ログを出力"""
        self.warning(message)

    def log_error(self, error, context: str = ""):
        """エラーログを出力"""
        if isinstance(error, Exception):
            error_message = f"エラーが発生しました: {type(error).__name__}: {error}"
        else:
            error_message = f"エラーが発生しました: {error}"
        if context:
            error_message = f"{context} - {error_message}"
        self.error(error_message)

    def log_metrics(self, stage: str, **values):
        """
        数値指標を key=value 形式で出力

        Args:
            stage: 段階名（例: "iteration 500", "評価"）
            **values: 指標名 → 値。float は有効数字6桁
        """
        parts = []
        for key, value in values.items():
            if isinstance(value, float):
                parts.append(f"{key}={value:.6g}")
            else:
                parts.append(f"{key}={value}")
        self.info(f"{stage}: {' '.join(parts)}")

    def log_performance(self, operation: str, duration: float):
        """パフォーマンスログを出力"""
        self.info(f"パフォーマンス - {operation}: {duration:.2f}秒")

    @contextmanager
    def timed(self, operation: str) -> Iterator[None]:
        """ブロックの所要時間を log_performance で記録する"""
        start = time.perf_counter()
        try:
            yield
        finally:
            self.log_performance(operation, time.perf_counter() - start)

    def set_level(self, level: str):
        """ログレベルを変更"""
        numeric_level = getattr(logging, level.upper(), logging.INFO)
        self.logger.setLevel(numeric_level)
        self.level = level


def get_default_logger() -> Logger:
    """コンソールのみのデフォルトロガー（ライブラリ単体利用時）"""
    existing = logging.getLogger(LOGGER_NAME)
    # アプリが設定済みならそのハンドラーを共有
    if existing.handlers:
        default = Logger.__new__(Logger)
        default.log_file = None
        default.level = logging.getLevelName(existing.level)
        default.logger = existing
        return default
    return Logger()
