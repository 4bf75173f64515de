# -*- coding: utf-8 -*-
"""
シーンデータ管理クラス

シーンディレクトリの構成:
    <data_dir>/cubes/<YYYY-MM-DD>.rcube (+ .json)   撮影日ごとのキューブ
    <data_dir>/reference.rcube (+ .json)            参照樹高
    <data_dir>/scene.json                           生成仕様などの付帯情報
"""

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Any

import numpy as np

from core.errors import DataError
from core.preprocess import NormStats, cloud_mask
from core.raster_io import HeightMap, RasterCube, read_cube, read_heights, write_cube, write_heights
from utils.date_utils import DateUtils
from utils.file_utils import FileUtils

CUBE_SUFFIX = ".rcube"
REFERENCE_FILE = "reference.rcube"
SCENE_FILE = "scene.json"


class DataManager:
    """シーンデータ管理クラス"""

    def __init__(self, data_dir: Path, create: bool = False):
        """
        初期化

        Args:
            data_dir: シーンディレクトリ
            create: ディレクトリが無ければ作成する
        """
        self.data_dir = Path(data_dir)
        self.cubes_dir = self.data_dir / "cubes"
        if create:
            self.cubes_dir.mkdir(parents=True, exist_ok=True)
        elif not self.data_dir.is_dir():
            raise DataError(f"シーンディレクトリが見つかりません: {self.data_dir}")

    @property
    def reference_path(self) -> Path:
        return self.data_dir / REFERENCE_FILE

    def cube_path(self, acquisition_date: str) -> Path:
        return self.cubes_dir / f"{DateUtils.normalize(acquisition_date)}{CUBE_SUFFIX}"

    def save_scene(self, cubes: Sequence[RasterCube], reference: Optional[HeightMap] = None,
                   info: Optional[Dict[str, Any]] = None) -> List[Path]:
        """
        キューブ・参照・付帯情報を保存

        Returns:
            List[Path]: 書き出したファイル（サイドカー JSON を除く）
        """
        DateUtils.assert_unique(c.acquisition_date for c in cubes)
        self.cubes_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for cube in cubes:
            path = self.cube_path(cube.acquisition_date)
            write_cube(cube, path)
            written.append(path)
        if reference is not None:
            write_heights(reference, self.reference_path)
            written.append(self.reference_path)
        if info is not None:
            path = self.data_dir / SCENE_FILE
            FileUtils.write_text_file(path, json.dumps(info, ensure_ascii=False, indent=2, sort_keys=True) + "\n")
            written.append(path)
        return written

    def list_cube_paths(self) -> List[Path]:
        """撮影日順のキューブファイル一覧"""
        paths = FileUtils.list_files(self.cubes_dir, f"*{CUBE_SUFFIX}")
        return sorted(paths, key=lambda p: DateUtils.sort_key(p.stem))

    def get_all_dates(self) -> List[str]:
        return [p.stem for p in self.list_cube_paths()]

    def load_cube(self, acquisition_date: str) -> RasterCube:
        path = self.cube_path(acquisition_date)
        if not path.exists():
            raise DataError(f"撮影日 {acquisition_date} のキューブがありません: {path}")
        return read_cube(path)

    def load_cubes(self, dates: Optional[Sequence[str]] = None) -> List[RasterCube]:
        """
        キューブを撮影日順に読み込み

        Args:
            dates: 読み込む撮影日（None なら全部）

        Raises:
            DataError: キューブが1つもない、形状が揃っていない
        """
        paths = self.list_cube_paths() if dates is None else [self.cube_path(d) for d in dates]
        if not paths:
            raise DataError(f"キューブがありません: {self.cubes_dir}")
        cubes = [read_cube(p) for p in paths]
        cubes.sort(key=lambda c: DateUtils.sort_key(c.acquisition_date))
        DateUtils.assert_unique(c.acquisition_date for c in cubes)
        shapes = {c.shape for c in cubes}
        if len(shapes) != 1:
            raise DataError(f"キューブの形状が揃っていません: {sorted(shapes)}")
        return cubes

    def load_reference(self) -> HeightMap:
        if not self.reference_path.exists():
            raise DataError(f"参照樹高がありません: {self.reference_path}")
        return read_heights(self.reference_path)

    def load_info(self) -> Dict[str, Any]:
        path = self.data_dir / SCENE_FILE
        if not path.exists():
            return {}
        return json.loads(FileUtils.read_text_file(path, encoding="utf-8"))

    def delete_cube(self, acquisition_date: str) -> bool:
        """撮影日のキューブとサイドカーを削除"""
        path = self.cube_path(acquisition_date)
        if not path.exists():
            return False
        path.unlink()
        sidecar = path.with_name(path.name + ".json")
        if sidecar.exists():
            sidecar.unlink()
        return True

    def get_statistics(self) -> Dict[str, Any]:
        """
        統計情報を取得

        Returns:
            Dict[str, Any]: 撮影日数・画像サイズ・撮影日ごとの雲画素率・参照の有効画素数
        """
        cubes = self.load_cubes()
        stats: Dict[str, Any] = {
            "n_dates": len(cubes),
            "shape": list(cubes[0].shape),
            "band_ids": list(cubes[0].band_ids),
            "cloudy_fraction": {c.acquisition_date: float(np.mean(cloud_mask(c.cloud_prob))) for c in cubes},
        }
        if self.reference_path.exists():
            reference = self.load_reference()
            stats["reference_valid_pixels"] = int(reference.valid.sum())
        return stats

    @staticmethod
    def save_norm_stats(stats: NormStats, path: Path) -> Path:
        path = Path(path)
        FileUtils.write_text_file(path, json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @staticmethod
    def load_norm_stats(path: Path) -> NormStats:
        try:
            return NormStats.from_dict(json.loads(FileUtils.read_text_file(Path(path), encoding="utf-8")))
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise DataError(f"正規化統計量を読み込めません ({path}): {e}") from e
