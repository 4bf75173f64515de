# -*- coding: utf-8 -*-
"""
設定管理クラス
"""

import dataclasses
import typing
from pathlib import Path
from typing import Any, Dict, Optional, Type, TypeVar

import yaml

from core.errors import ConfigError
from utils.file_utils import FileUtils

T = TypeVar("T")


class ConfigManager:
    """ツールキット設定管理クラス"""

    def __init__(self, config_dir: Path):
        """
        初期化

        Args:
            config_dir: 設定ファイルディレクトリ
        """
        self.config_dir = Path(config_dir)
        self.config_dir.mkdir(parents=True, exist_ok=True)

        self.app_config_path = self.config_dir / "app_config.yaml"
        self.scene_spec_path = self.config_dir / "scene_spec.yaml"
        self.train_config_path = self.config_dir / "train_config.yaml"
        self.ablation_config_path = self.config_dir / "ablation_config.yaml"

        self.default_app_config = {
            "app_name": "CanopyHeight",
            "logging": {
                "level": "INFO",
                "file": "data/logs/canopy.log",
            },
            "inference": {
                "preset": "tropical",
                "tile_size": 128,
                "overlap": 8,
            },
            "presets": {
                "tropical": {"mask_water": True, "mask_snow": False},
                "temperate": {"mask_water": True, "mask_snow": True},
            },
        }

        self.default_scene_spec = {
            "scene": {
                "seed": 1,
                "height": 256,
                "width": 256,
                "correlation_length_px": 12.0,
                "max_height_m": 45.0,
                "cloud_coverage_fraction": 0.2,
                "n_dates": 3,
            }
        }

        self.default_train_config = {
            "train": {
                "base_lr": 1.0e-4,
                "batch_size": 36,
                "weight_decay": 0.0,
                "max_iterations": 10000,
                "val_every": 500,
                "seed": 1,
            },
            "model": {
                "trunk_width": 64,
                "n_blocks": 4,
                "entry_depths": [16, 32],
                "kernel_mode": "3x3",
            },
            "data": {
                "band_subset": "ALL",
                "split_fractions": [0.6, 0.15, 0.25],
                "exclude_cloudy_stats": True,
                "val_patches": 2000,
            },
        }

        self.default_ablation_config = dict(self.default_train_config)
        self.default_ablation_config["ablation"] = {
            "variants": ["ALL", "RGB", "N", "RGBN", "woRGBN", "ALL_1x1"],
        }

        self._initialize_configs()

    def _initialize_configs(self):
        """設定ファイルを初期化（存在しないものだけ既定値で作成）"""
        defaults = [
            (self.app_config_path, self.default_app_config),
            (self.scene_spec_path, self.default_scene_spec),
            (self.train_config_path, self.default_train_config),
            (self.ablation_config_path, self.default_ablation_config),
        ]
        for path, data in defaults:
            if not path.exists():
                self.save_yaml(path, data)

    def get_app_config(self) -> Dict[str, Any]:
        """アプリケーション設定を取得"""
        return self.load_yaml(self.app_config_path)

    def get_inference_preset(self, name: str) -> Dict[str, Any]:
        """推論プリセット（マスク設定）を取得"""
        presets = self.get_app_config().get("presets") or self.default_app_config["presets"]
        if name not in presets:
            raise ConfigError(f"未知のプリセットです: {name} (候補: {', '.join(presets)})")
        return dict(presets[name])

    def get_inference_config(self, preset: Optional[str] = None, **overrides):
        """app_config.yaml の inference セクションとプリセットから InferenceConfig を作る"""
        from core.inference import InferenceConfig

        section = dict(self.get_app_config().get("inference") or {})
        name = preset or section.pop("preset", "tropical")
        section.pop("preset", None)
        values = self.get_inference_preset(name)
        values.update(section)
        values.update({k: v for k, v in overrides.items() if v is not None})
        config = self.to_dataclass(InferenceConfig, values, "inference")
        config.validate()
        return config

    def load_scene_spec(self, file_path: Optional[Path] = None):
        """シーン仕様ファイル（scene セクション）を SceneSpec に変換"""
        from core.synthetic import SceneSpec

        sections = self.load_sections(file_path or self.scene_spec_path, ["scene"])
        spec = self.to_dataclass(SceneSpec, sections.get("scene"), "scene")
        spec.validate()
        return spec

    def load_train_setup(self, file_path: Optional[Path] = None, extra_sections: typing.Iterable[str] = ()):
        """
        学習設定ファイル（train / model / data セクション）を TrainSetup に変換

        Args:
            file_path: 設定ファイル（None なら既定の train_config.yaml）
            extra_sections: 他に許可するセクション（ablation など）
        """
        from core.model import ModelConfig
        from core.trainer import DataConfig, TrainConfig, TrainSetup

        allowed = ["train", "model", "data"] + list(extra_sections)
        sections = self.load_sections(file_path or self.train_config_path, allowed)
        setup = TrainSetup(
            train=self.to_dataclass(TrainConfig, sections.get("train"), "train"),
            model=self.to_dataclass(ModelConfig, sections.get("model"), "model"),
            data=self.to_dataclass(DataConfig, sections.get("data"), "data"),
        )
        setup.validate()
        return setup

    def load_ablation_setup(self, file_path: Optional[Path] = None):
        """アブレーション設定（学習設定 + ablation.variants）"""
        from core.experiments import VARIANTS

        path = file_path or self.ablation_config_path
        setup = self.load_train_setup(path, extra_sections=["ablation"])
        section = self.load_sections(path, ["train", "model", "data", "ablation"]).get("ablation", {})
        unknown_keys = sorted(set(section) - {"variants"})
        if unknown_keys:
            raise ConfigError(f"[ablation] 未知の設定キーです: {', '.join(unknown_keys)}")
        variants = section.get("variants", list(VARIANTS))
        if not isinstance(variants, list) or not variants:
            raise ConfigError("[ablation] variants は空でないリストで指定してください")
        unknown = [v for v in variants if v not in VARIANTS]
        if unknown:
            raise ConfigError(f"[ablation] 未知の構成です: {', '.join(map(str, unknown))} "
                              f"(候補: {', '.join(VARIANTS)})")
        return setup, variants

    def load_yaml(self, file_path: Path) -> Dict[str, Any]:
        """
        YAMLファイルを読み込み

        Raises:
            ConfigError: ファイルが読めない、または構文エラー
        """
        try:
            text = FileUtils.read_text_file(Path(file_path))
            data = yaml.safe_load(text)
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"YAML読み込みエラー ({file_path}): {e}") from e
        if data is None:
            return {}
        if not isinstance(data, dict):
            raise ConfigError(f"YAMLの最上位はマッピングである必要があります ({file_path})")
        return data

    def save_yaml(self, file_path: Path, data: Dict[str, Any]):
        """YAMLファイルに保存"""
        FileUtils.write_text_file(
            Path(file_path),
            yaml.safe_dump(data, default_flow_style=False, allow_unicode=True, sort_keys=False)
        )

    def load_sections(self, file_path: Path, allowed: typing.Iterable[str]) -> Dict[str, Dict[str, Any]]:
        """
        セクション単位の設定ファイルを読み込み、未知のセクションを拒否する

        Args:
            file_path: 設定ファイル
            allowed: 許可するセクション名

        Returns:
            Dict[str, Dict[str, Any]]: セクション名 → 内容
        """
        data = self.load_yaml(file_path)
        allowed = set(allowed)
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigError(f"未知のセクションがあります ({file_path}): {', '.join(unknown)}")
        for name, section in data.items():
            if section is not None and not isinstance(section, dict):
                raise ConfigError(f"セクション '{name}' はマッピングである必要があります ({file_path})")
        return {name: dict(data.get(name) or {}) for name in allowed if name in data}

    @staticmethod
    def to_dataclass(cls: Type[T], values: Optional[Dict[str, Any]], context: str = "") -> T:
        """
        設定値をデータクラスへ厳密に変換する

        未知のキー・型違いは ConfigError。省略されたキーは既定値を使う。

        Args:
            cls: 変換先のデータクラス
            values: 設定値の辞書
            context: エラーメッセージ用のセクション名
        """
        values = dict(values or {})
        field_map = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(field_map))
        where = f"[{context}] " if context else ""
        if unknown:
            raise ConfigError(f"{where}未知の設定キーです: {', '.join(unknown)}")

        hints = typing.get_type_hints(cls)
        kwargs = {}
        for key, raw in values.items():
            kwargs[key] = ConfigManager._coerce(raw, hints[key], f"{where}{key}")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{where}設定値が不正です: {e}") from e

    @staticmethod
    def _coerce(raw: Any, hint: Any, key: str) -> Any:
        """型ヒントに合わせて値を検査・変換"""
        origin = typing.get_origin(hint)
        args = typing.get_args(hint)

        if origin is typing.Union:
            if raw is None and type(None) in args:
                return None
            inner = [a for a in args if a is not type(None)]
            return ConfigManager._coerce(raw, inner[0], key)
        if origin in (tuple, list):
            if not isinstance(raw, (list, tuple)):
                raise ConfigError(f"{key}: リストを指定してください (値: {raw!r})")
            item_hint = args[0] if args else Any
            items = [ConfigManager._coerce(v, item_hint, key) for v in raw]
            return tuple(items) if origin is tuple else items
        if hint is bool:
            if not isinstance(raw, bool):
                raise ConfigError(f"{key}: true/false を指定してください (値: {raw!r})")
            return raw
        if hint is int:
            if isinstance(raw, bool) or not isinstance(raw, int):
                raise ConfigError(f"{key}: 整数を指定してください (値: {raw!r})")
            return raw
        if hint is float:
            if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                raise ConfigError(f"{key}: 数値を指定してください (値: {raw!r})")
            return float(raw)
        if hint is str:
            if not isinstance(raw, str):
                raise ConfigError(f"{key}: 文字列を指定してください (値: {raw!r})")
            return raw
        return raw
