# -*- coding: utf-8 -*-
"""
実行マニフェスト

成果物を作るコマンドは出力ディレクトリに manifest.json を1つ書き出す。
スキーマは docs/run_manifest.md を参照。
"""

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from utils.date_utils import DateUtils
from utils.file_utils import FileUtils

TOOLKIT_VERSION = "1.0.0"
MANIFEST_FILE = "manifest.json"
SCHEMA_VERSION = 1


@dataclass
class RunManifest:
    """1回のコマンド実行の記録"""
    command: str
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    seed: Optional[int] = None
    started_at: str = ""
    wall_clock_s: float = 0.0
    toolkit_version: str = TOOLKIT_VERSION
    results: Dict[str, Any] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, out_dir: Path) -> Path:
        path = FileUtils.ensure_directory(Path(out_dir)) / MANIFEST_FILE
        FileUtils.write_text_file(path, json.dumps(self.to_dict(), ensure_ascii=False, indent=2,
                                                   sort_keys=True, default=str) + "\n")
        return path

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_FILE
        return cls(**json.loads(FileUtils.read_text_file(path, encoding="utf-8")))


class ManifestRecorder:
    """コマンドの入出力と所要時間を集めてマニフェストを作る"""

    def __init__(self, command: str, seed: Optional[int] = None, config: Optional[Dict[str, Any]] = None):
        self.manifest = RunManifest(command=command, config=dict(config or {}), seed=seed,
                                    started_at=DateUtils.get_now_utc().isoformat())
        self._start = time.perf_counter()

    def add_inputs(self, paths: Iterable[Path]):
        """入力ファイル（ディレクトリなら中のファイルすべて）の SHA-256 を記録"""
        for path in paths:
            path = Path(path)
            files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
            for item in files:
                self.manifest.inputs[str(item)] = FileUtils.sha256(item)

    def add_outputs(self, paths: Iterable[Path]):
        for path in paths:
            path = Path(path)
            self.manifest.outputs[str(path)] = FileUtils.sha256(path)

    def set_result(self, key: str, value: Any):
        self.manifest.results[key] = value

    def finish(self, out_dir: Path) -> Path:
        """所要時間を確定して manifest.json を書き出す"""
        self.manifest.wall_clock_s = round(time.perf_counter() - self._start, 3)
        return self.manifest.write(out_dir)
