# -*- coding: utf-8 -*-
"""ラスタコンテナの読み書き"""

import json

import numpy as np
import pytest
from PIL import Image

from core.errors import DataError, RasterFormatError
from core.raster_io import (
    HEADER, HeightMap, encode_cube, export_pgm, read_cube, read_heights, sidecar_path,
    write_cube, write_heights,
)


def test_cube_survives_write_and_read(tmp_path, make_cube):
    cube = make_cube(date="2017-01-23")
    path = tmp_path / "scene.rcube"
    write_cube(cube, path)

    loaded = read_cube(path)
    assert loaded.equals(cube)
    assert loaded.acquisition_date == "2017-01-23"
    meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    assert meta["band_ids"][0] == "B01"


def test_encoding_is_byte_stable(make_cube):
    cube = make_cube(seed=4)
    assert encode_cube(cube) == encode_cube(make_cube(seed=4))


def test_bad_magic_reports_offset_zero(tmp_path, make_cube):
    path = tmp_path / "bad.rcube"
    write_cube(make_cube(), path)
    payload = bytearray(path.read_bytes())
    payload[:4] = b"XXXX"
    path.write_bytes(bytes(payload))

    with pytest.raises(RasterFormatError) as info:
        read_cube(path)
    assert info.value.offset == 0
    assert info.value.expected == b"RCUB"


def test_truncated_payload_is_rejected(tmp_path, make_cube):
    path = tmp_path / "short.rcube"
    write_cube(make_cube(), path)
    path.write_bytes(path.read_bytes()[:-10])

    with pytest.raises(RasterFormatError) as info:
        read_cube(path)
    assert info.value.offset >= HEADER.size


def test_missing_sidecar_is_a_data_error(tmp_path, make_cube):
    path = tmp_path / "lonely.rcube"
    write_cube(make_cube(), path)
    sidecar_path(path).unlink()
    with pytest.raises(DataError):
        read_cube(path)


def test_cube_rejects_out_of_range_cloud(make_cube):
    with pytest.raises(DataError):
        make_cube(cloud_prob=np.full((16, 16), 101.0, dtype=np.float32))


def test_cube_rejects_duplicate_bands(make_cube):
    with pytest.raises(DataError):
        make_cube(bands=("B02", "B02"))


def test_height_map_keeps_nan_outside_valid():
    valid = np.array([[True, False], [True, True]])
    hmap = HeightMap(np.array([[1.0, 2.0], [3.0, 4.0]]), valid)
    assert np.isnan(hmap.heights[0, 1])
    assert hmap.heights[1, 1] == 4.0


def test_heights_keep_sidecar_metadata(tmp_path):
    hmap = HeightMap(np.arange(6, dtype=np.float32).reshape(2, 3), np.ones((2, 3), dtype=bool),
                     meta={"acquisition_date": "2020-01-10"})
    path = tmp_path / "pred.rcube"
    write_heights(hmap, path)

    loaded = read_heights(path)
    assert loaded.equals(hmap)
    assert loaded.meta["acquisition_date"] == "2020-01-10"


def test_heights_reader_rejects_cube_container(tmp_path, make_cube):
    path = tmp_path / "cube.rcube"
    write_cube(make_cube(), path)
    with pytest.raises(RasterFormatError):
        read_heights(path)


def test_pgm_quicklook_scales_linearly(tmp_path):
    heights = np.array([[0.0, 30.0], [60.0, 90.0]])
    valid = np.array([[True, True], [True, False]])
    path = tmp_path / "quick.pgm"
    export_pgm(HeightMap(heights, valid), path)

    gray = np.array(Image.open(path))
    assert gray.tolist() == [[0, 128], [255, 0]]
