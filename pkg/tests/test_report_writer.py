# -*- coding: utf-8 -*-
"""評価結果の書き出しと実行マニフェスト"""

import json

import numpy as np
import openpyxl
import pandas as pd

from cli.manifest import MANIFEST_FILE, ManifestRecorder, RunManifest
from core.evaluate import evaluate
from core.raster_io import HeightMap
from core.report_writer import ReportWriter
from utils.file_utils import FileUtils


def _report():
    rng = np.random.default_rng(0)
    ref = HeightMap(rng.uniform(0.0, 35.0, (12, 12)), np.ones((12, 12), dtype=bool))
    pred = HeightMap(ref.heights + rng.normal(0.0, 2.0, (12, 12)), np.ones((12, 12), dtype=bool))
    return evaluate(pred, ref, name="site")


def test_report_files(tmp_path):
    report = _report()
    paths = ReportWriter(tmp_path).write_report(report, extra={"regions": ["site"]})
    assert set(paths) == {"report", "bins", "confusion", "cumulative"}

    summary = json.loads(paths["report"].read_text(encoding="utf-8"))
    assert summary["mae"] == report.mae
    assert summary["regions"] == ["site"]

    bins = pd.read_csv(paths["bins"])
    assert bins["count"].sum() == 144
    confusion = pd.read_csv(paths["confusion"])
    assert list(confusion.columns) == ["row", "col", "count"]
    assert confusion["count"].sum() == 144
    cumulative = pd.read_csv(paths["cumulative"])
    assert cumulative["fraction_below"].iloc[-1] == 1.0
    assert b"\r\n" not in paths["bins"].read_bytes()


def test_prefixed_files_and_workbook(tmp_path):
    report = _report()
    paths = ReportWriter(tmp_path).write_report(report, xlsx=True, prefix="north_")
    assert paths["report"].name == "north_report.json"
    assert paths["xlsx"].name == "north_report.xlsx"

    wb = openpyxl.load_workbook(paths["xlsx"])
    assert wb.sheetnames == ["summary", "bins", "confusion", "cumulative"]
    summary = wb["summary"]
    assert summary["A3"].value == "name" and summary["B3"].value == "site"
    assert summary["B4"].value == report.mae
    assert wb["bins"]["A1"].value == "lower"


def test_report_json_is_stable(tmp_path):
    report = _report()
    first = ReportWriter(tmp_path / "a").write_report(report)["report"]
    second = ReportWriter(tmp_path / "b").write_report(report)["report"]
    assert FileUtils.sha256(first) == FileUtils.sha256(second)


def test_manifest_records_hashes(tmp_path):
    data = tmp_path / "in.txt"
    data.write_text("abc", encoding="utf-8")
    out = tmp_path / "out.txt"
    out.write_text("xyz", encoding="utf-8")

    recorder = ManifestRecorder("params", seed=4, config={"k": 1})
    recorder.add_inputs([data])
    recorder.add_outputs([out])
    recorder.set_result("total", 10)
    path = recorder.finish(tmp_path / "run")
    assert path.name == MANIFEST_FILE

    manifest = RunManifest.read(tmp_path / "run")
    assert manifest.command == "params"
    assert manifest.seed == 4
    assert manifest.inputs[str(data)] == FileUtils.sha256(data)
    assert manifest.outputs[str(out)] == FileUtils.sha256(out)
    assert manifest.results == {"total": 10}
    assert manifest.wall_clock_s >= 0.0
    assert manifest.started_at.endswith("+00:00")


def test_manifest_hashes_directory_inputs(tmp_path):
    folder = tmp_path / "scene"
    (folder / "cubes").mkdir(parents=True)
    (folder / "cubes" / "a.rcube").write_bytes(b"\x00\x01")
    (folder / "scene.json").write_text("{}", encoding="utf-8")
    recorder = ManifestRecorder("stats")
    recorder.add_inputs([folder])
    assert len(recorder.manifest.inputs) == 2
