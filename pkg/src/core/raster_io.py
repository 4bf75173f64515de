# -*- coding: utf-8 -*-
"""
ラスタコンテナ (.rcube) の読み書き

形式（リトルエンディアン）:
    magic "RCUB" | version u16 | kind u8 | dtype u8 | C u16 | H u32 | W u32
    kind=cube   : バンド C×H×W float32, 雲確率 H×W float32, 土地被覆 H×W u8, 有効 H×W u8
    kind=height : 樹高 H×W float32 (無効画素は NaN), 有効 H×W u8
メタデータは同名 + ".json" のサイドカーに保存する。
"""

import json
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, Any, Tuple

import numpy as np
from PIL import Image

from core.errors import DataError, RasterFormatError
from utils.date_utils import DateUtils
from utils.file_utils import FileUtils

MAGIC = b"RCUB"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 1
KIND_CUBE = 0
KIND_HEIGHT = 1

HEADER = struct.Struct("<4sHBBHII")

# Sentinel-2 の13バンド（正準順）
SENTINEL2_BANDS: Tuple[str, ...] = (
    "B01", "B02", "B03", "B04", "B05", "B06", "B07",
    "B08", "B8A", "B09", "B10", "B11", "B12",
)


class LandCover(IntEnum):
    """Level 2A 土地被覆クラス（本ツールで使う4区分）"""
    OTHER = 0
    VEGETATION = 1
    WATER = 2
    SNOW = 3


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class RasterCube:
    """1回の撮影分のラスタ（反射率バンド＋雲確率＋土地被覆＋有効マスク）"""
    bands: np.ndarray
    cloud_prob: np.ndarray
    landcover: np.ndarray
    valid: np.ndarray
    gsd_m: float
    acquisition_date: str
    band_ids: Tuple[str, ...]

    def __post_init__(self):
        bands = np.array(self.bands, dtype=np.float32, copy=True)
        if bands.ndim != 3:
            raise DataError(f"バンド配列は C×H×W である必要があります: shape={bands.shape}")
        n_bands, height, width = bands.shape
        band_ids = tuple(self.band_ids)
        if not 1 <= n_bands <= len(SENTINEL2_BANDS):
            raise DataError(f"バンド数は1〜13である必要があります: {n_bands}")
        if len(band_ids) != n_bands:
            raise DataError(f"band_ids の数 ({len(band_ids)}) とバンド数 ({n_bands}) が一致しません")
        if len(set(band_ids)) != n_bands:
            raise DataError(f"band_ids が重複しています: {band_ids}")
        unknown = [b for b in band_ids if b not in SENTINEL2_BANDS]
        if unknown:
            raise DataError(f"Sentinel-2 のバンド名ではありません: {unknown}")

        cloud = np.array(self.cloud_prob, dtype=np.float32, copy=True)
        landcover = np.array(self.landcover, dtype=np.uint8, copy=True)
        valid = np.array(self.valid, dtype=bool, copy=True)
        for name, plane in (("cloud_prob", cloud), ("landcover", landcover), ("valid", valid)):
            if plane.shape != (height, width):
                raise DataError(f"{name} の形状 {plane.shape} がバンド ({height}, {width}) と一致しません")
        if not np.all((cloud >= 0.0) & (cloud <= 100.0)):
            raise DataError("cloud_prob は [0, 100] の範囲である必要があります")
        if landcover.size and landcover.max() > max(LandCover):
            raise DataError(f"未知の土地被覆コードがあります: {int(landcover.max())}")
        if not self.gsd_m > 0:
            raise DataError(f"gsd_m は正である必要があります: {self.gsd_m}")

        object.__setattr__(self, "bands", _readonly(bands))
        object.__setattr__(self, "cloud_prob", _readonly(cloud))
        object.__setattr__(self, "landcover", _readonly(landcover))
        object.__setattr__(self, "valid", _readonly(valid))
        object.__setattr__(self, "band_ids", band_ids)
        object.__setattr__(self, "gsd_m", float(self.gsd_m))
        object.__setattr__(self, "acquisition_date", DateUtils.normalize(self.acquisition_date))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bands.shape[1], self.bands.shape[2]

    def band(self, band_id: str) -> np.ndarray:
        """バンド名で平面を取得"""
        return self.bands[self.band_ids.index(band_id)]

    def equals(self, other: "RasterCube") -> bool:
        """ビット単位で等しいか"""
        return (self.band_ids == other.band_ids
                and self.gsd_m == other.gsd_m
                and self.acquisition_date == other.acquisition_date
                and self.bands.tobytes() == other.bands.tobytes()
                and self.cloud_prob.tobytes() == other.cloud_prob.tobytes()
                and np.array_equal(self.landcover, other.landcover)
                and np.array_equal(self.valid, other.valid))


@dataclass(frozen=True, eq=False)
class HeightMap:
    """樹高マップ（メートル）と有効マスク。無効画素は NaN を保持する"""
    heights: np.ndarray
    valid: np.ndarray
    gsd_m: float = 10.0
    meta: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        heights = np.array(self.heights, dtype=np.float32, copy=True)
        valid = np.array(self.valid, dtype=bool, copy=True)
        if heights.ndim != 2 or heights.shape != valid.shape:
            raise DataError(f"樹高と有効マスクの形状が一致しません: {heights.shape} / {valid.shape}")
        if not np.all(np.isfinite(heights[valid])):
            raise DataError("有効画素に非有限の樹高があります")
        heights[~valid] = np.nan
        object.__setattr__(self, "heights", _readonly(heights))
        object.__setattr__(self, "valid", _readonly(valid))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.heights.shape

    def with_valid(self, valid: np.ndarray) -> "HeightMap":
        """有効マスクを差し替えた新しいマップ（値は元の有効画素のみ保持）"""
        valid = np.asarray(valid, dtype=bool) & self.valid
        return HeightMap(np.where(valid, self.heights, np.nan), valid, self.gsd_m, dict(self.meta))

    def equals(self, other: "HeightMap") -> bool:
        return (self.heights.tobytes() == other.heights.tobytes()
                and np.array_equal(self.valid, other.valid))


def sidecar_path(path: Path) -> Path:
    """メタデータ JSON のパス"""
    path = Path(path)
    return path.with_name(path.name + ".json")


def _pack_header(kind: int, n_bands: int, height: int, width: int) -> bytes:
    try:
        return HEADER.pack(MAGIC, FORMAT_VERSION, kind, DTYPE_FLOAT32, n_bands, height, width)
    except struct.error as e:
        raise DataError(f"次元が形式の上限を超えています: C={n_bands}, H={height}, W={width}") from e


def encode_cube(cube: RasterCube) -> bytes:
    """キューブをバイト列に変換"""
    n_bands, height, width = cube.bands.shape
    parts = [
        _pack_header(KIND_CUBE, n_bands, height, width),
        cube.bands.astype("<f4", copy=False).tobytes(order="C"),
        cube.cloud_prob.astype("<f4", copy=False).tobytes(order="C"),
        cube.landcover.astype(np.uint8, copy=False).tobytes(order="C"),
        cube.valid.astype(np.uint8).tobytes(order="C"),
    ]
    return b"".join(parts)


def write_cube(cube: RasterCube, path: Path):
    """
    キューブを .rcube とサイドカー JSON に書き出す

    Args:
        cube: 書き出すキューブ
        path: 出力パス
    """
    path = Path(path)
    FileUtils.write_bytes_atomic(path, encode_cube(cube))
    manifest = {
        "gsd_m": cube.gsd_m,
        "acquisition_date": cube.acquisition_date,
        "band_ids": list(cube.band_ids),
    }
    FileUtils.write_text_file(sidecar_path(path), json.dumps(manifest, indent=2, sort_keys=True))


def _parse_header(payload: bytes, expected_kind: int) -> Tuple[int, int, int]:
    if len(payload) < len(MAGIC) or payload[:4] != MAGIC:
        raise RasterFormatError("マジックバイトが一致しません", offset=0,
                                expected=MAGIC, actual=bytes(payload[:4]))
    if len(payload) < HEADER.size:
        raise RasterFormatError("ヘッダーが途中で切れています", offset=len(payload),
                                expected=HEADER.size, actual=len(payload))
    _, version, kind, dtype_tag, n_bands, height, width = HEADER.unpack_from(payload, 0)
    if version != FORMAT_VERSION:
        raise RasterFormatError("未対応のバージョンです", offset=4,
                                expected=FORMAT_VERSION, actual=version)
    if kind != expected_kind:
        raise RasterFormatError("コンテナ種別が一致しません", offset=6,
                                expected=expected_kind, actual=kind)
    if dtype_tag != DTYPE_FLOAT32:
        raise RasterFormatError("未対応のデータ型タグです", offset=7,
                                expected=DTYPE_FLOAT32, actual=dtype_tag)
    return n_bands, height, width


def _take(payload: bytes, offset: int, count: int, dtype: str, what: str) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    end = offset + count * itemsize
    if end > len(payload):
        raise RasterFormatError(f"{what} の途中でデータが切れています", offset=offset,
                                expected=end, actual=len(payload))
    return np.frombuffer(payload, dtype=dtype, count=count, offset=offset)


def _read_sidecar(path: Path) -> Dict[str, Any]:
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise DataError(f"メタデータ JSON が見つかりません: {meta_path}")
    try:
        return json.loads(FileUtils.read_text_file(meta_path, encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"メタデータ JSON を解析できません ({meta_path}): {e}") from e


def decode_cube(payload: bytes, meta: Dict[str, Any]) -> RasterCube:
    """バイト列とメタデータからキューブを復元"""
    n_bands, height, width = _parse_header(payload, KIND_CUBE)
    plane = height * width
    offset = HEADER.size
    bands = _take(payload, offset, n_bands * plane, "<f4", "バンド")
    offset += bands.nbytes
    cloud = _take(payload, offset, plane, "<f4", "雲確率")
    offset += cloud.nbytes
    landcover = _take(payload, offset, plane, "u1", "土地被覆")
    offset += landcover.nbytes
    valid = _take(payload, offset, plane, "u1", "有効マスク")
    offset += valid.nbytes
    if offset != len(payload):
        raise RasterFormatError("末尾に余分なデータがあります", offset=offset,
                                expected=offset, actual=len(payload))

    band_ids = tuple(meta.get("band_ids", ()))
    if len(band_ids) != n_bands:
        raise RasterFormatError("メタデータのバンド数がヘッダーと一致しません", offset=8,
                                expected=n_bands, actual=len(band_ids))
    try:
        return RasterCube(
            bands=bands.reshape(n_bands, height, width),
            cloud_prob=cloud.reshape(height, width),
            landcover=landcover.reshape(height, width),
            valid=valid.reshape(height, width).astype(bool),
            gsd_m=float(meta["gsd_m"]),
            acquisition_date=str(meta["acquisition_date"]),
            band_ids=band_ids,
        )
    except KeyError as e:
        raise DataError(f"メタデータにキーがありません: {e}") from e


def read_cube(path: Path) -> RasterCube:
    """
    .rcube を読み込む

    Raises:
        RasterFormatError: マジック不一致・途中切れなど（オフセット付き）
        DataError: メタデータ不備・不変条件違反
    """
    path = Path(path)
    payload = path.read_bytes()
    return decode_cube(payload, _read_sidecar(path))


def write_heights(hmap: HeightMap, path: Path):
    """樹高マップを1バンドの .rcube として書き出す"""
    path = Path(path)
    height, width = hmap.shape
    payload = b"".join([
        _pack_header(KIND_HEIGHT, 1, height, width),
        hmap.heights.astype("<f4", copy=False).tobytes(order="C"),
        hmap.valid.astype(np.uint8).tobytes(order="C"),
    ])
    FileUtils.write_bytes_atomic(path, payload)
    manifest = {"gsd_m": hmap.gsd_m, "kind": "height"}
    manifest.update({k: v for k, v in hmap.meta.items() if k not in manifest})
    FileUtils.write_text_file(sidecar_path(path), json.dumps(manifest, indent=2, sort_keys=True))


def read_heights(path: Path) -> HeightMap:
    """1バンドの樹高 .rcube を読み込む"""
    path = Path(path)
    payload = path.read_bytes()
    meta = _read_sidecar(path)
    n_bands, height, width = _parse_header(payload, KIND_HEIGHT)
    if n_bands != 1:
        raise RasterFormatError("樹高コンテナは1バンドである必要があります", offset=8,
                                expected=1, actual=n_bands)
    plane = height * width
    offset = HEADER.size
    heights = _take(payload, offset, plane, "<f4", "樹高")
    offset += heights.nbytes
    valid = _take(payload, offset, plane, "u1", "有効マスク")
    offset += valid.nbytes
    if offset != len(payload):
        raise RasterFormatError("末尾に余分なデータがあります", offset=offset,
                                expected=offset, actual=len(payload))
    extra = {k: v for k, v in meta.items() if k not in ("gsd_m", "kind")}
    return HeightMap(heights.reshape(height, width), valid.reshape(height, width).astype(bool),
                     float(meta.get("gsd_m", 10.0)), extra)


def export_pgm(hmap: HeightMap, path: Path, max_height: float = 60.0):
    """
    確認用の8bitグレースケール PGM を書き出す（0〜max_height m を線形に割り当て）

    無効画素は黒。
    """
    scaled = np.where(hmap.valid, hmap.heights, 0.0) / max_height * 255.0
    gray = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(gray, mode="L").save(path, format="PPM")
