# -*- coding: utf-8 -*-
"""
ファイル操作ユーティリティ
"""

import hashlib
import os
import tempfile
from pathlib import Path
from typing import List, Optional

import chardet


class FileUtils:
    """ファイル操作ユーティリティクラス"""

    @staticmethod
    def read_text_file(file_path: Path, encoding: Optional[str] = None) -> str:
        """
        テキストファイルを読み込み

        Args:
            file_path: ファイルパス
            encoding: エンコーディング（指定しない場合は自動検出）

        Returns:
            str: ファイル内容
        """
        if encoding is None:
            encoding = FileUtils.detect_encoding(file_path)

        with open(file_path, 'r', encoding=encoding) as file:
            return file.read()

    @staticmethod
    def write_text_file(file_path: Path, content: str, encoding: str = 'utf-8'):
        """
        テキストファイルに書き込み

        Args:
            file_path: ファイルパス
            content: 書き込み内容
            encoding: エンコーディング
        """
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, 'w', encoding=encoding, newline='\n') as file:
            file.write(content)

    @staticmethod
    def write_bytes_atomic(file_path: Path, payload: bytes):
        """一時ファイル経由でバイナリを書き込み、完了後に置き換える"""
        file_path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=file_path.parent, prefix=f".{file_path.name}.")
        try:
            with os.fdopen(fd, 'wb') as tmp:
                tmp.write(payload)
            os.replace(tmp_name, file_path)
        except BaseException:
            if os.path.exists(tmp_name):
                os.remove(tmp_name)
            raise

    @staticmethod
    def detect_encoding(file_path: Path) -> str:
        """
        ファイルのエンコーディングを検出

        Args:
            file_path: ファイルパス

        Returns:
            str: エンコーディング名
        """
        with open(file_path, 'rb') as file:
            raw_data = file.read()
        if not raw_data:
            return 'utf-8'
        result = chardet.detect(raw_data)
        encoding = result['encoding'] or 'utf-8'
        # ascii 判定は utf-8 で読む
        return 'utf-8' if encoding.lower() == 'ascii' else encoding

    @staticmethod
    def sha256(file_path: Path, chunk_size: int = 1 << 20) -> str:
        """ファイルの SHA-256 を16進文字列で返す"""
        digest = hashlib.sha256()
        with open(file_path, 'rb') as file:
            for chunk in iter(lambda: file.read(chunk_size), b''):
                digest.update(chunk)
        return digest.hexdigest()

    @staticmethod
    def list_files(directory: Path, pattern: str = "*") -> List[Path]:
        """
        ディレクトリ内のファイルを名前順でリスト

        Args:
            directory: ディレクトリパス
            pattern: ファイルパターン
        """
        if not directory.exists():
            return []
        return sorted(p for p in directory.glob(pattern) if p.is_file())

    @staticmethod
    def ensure_directory(directory: Path) -> Path:
        """ディレクトリが無ければ作成して返す"""
        directory.mkdir(parents=True, exist_ok=True)
        return directory

    @staticmethod
    def get_safe_filename(filename: str) -> str:
        """
        ファイル名として安全な文字列に変換

        Args:
            filename: 元のファイル名

        Returns:
            str: 安全なファイル名
        """
        invalid_chars = '<>:"/\\|?*'
        for char in invalid_chars:
            filename = filename.replace(char, '_')

        if len(filename) > 200:
            filename = filename[:200]

        return filename.strip()
