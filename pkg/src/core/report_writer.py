# -*- coding: utf-8 -*-
"""
評価結果・表の書き出し

report.json（要約）, bins.csv, confusion.csv（疎な三つ組）, cumulative.csv、
必要なら report.xlsx（openpyxl）を出力する。
"""

import json
from pathlib import Path
from typing import Dict, Mapping, Optional, Any

import openpyxl
import pandas as pd
from openpyxl.styles import Font

from core.evaluate import EvalReport
from utils.file_utils import FileUtils


class ReportWriter:
    """評価結果の書き出しクラス"""

    def __init__(self, out_dir: Path):
        """
        初期化

        Args:
            out_dir: 出力ディレクトリ
        """
        self.out_dir = FileUtils.ensure_directory(Path(out_dir))

    def write_json(self, name: str, data: Dict[str, Any]) -> Path:
        path = self.out_dir / name
        FileUtils.write_text_file(path, json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n")
        return path

    def write_table(self, name: str, frame: pd.DataFrame) -> Path:
        """DataFrame を CSV に書き出す（改行は LF 固定）"""
        path = self.out_dir / name
        FileUtils.write_text_file(path, frame.to_csv(index=False, lineterminator="\n"))
        return path

    def write_report(self, report: EvalReport, extra: Optional[Dict[str, Any]] = None,
                     xlsx: bool = False, prefix: str = "") -> Dict[str, Path]:
        """
        評価結果一式を書き出す

        Args:
            report: 評価結果
            extra: report.json に追加する項目
            xlsx: report.xlsx も書き出すか
            prefix: ファイル名の接頭辞（領域別の出力用）

        Returns:
            Dict[str, Path]: 種別 → パス
        """
        summary = report.summary()
        summary.update(extra or {})
        tables = {
            "bins": report.bins_frame(),
            "confusion": report.confusion.triplets(),
            "cumulative": report.cumulative.frame(),
        }
        paths = {"report": self.write_json(f"{prefix}report.json", summary)}
        for kind, frame in tables.items():
            paths[kind] = self.write_table(f"{prefix}{kind}.csv", frame)
        if xlsx:
            paths["xlsx"] = self.write_excel(f"{prefix}report.xlsx", summary, tables)
        return paths

    def write_excel(self, name: str, summary: Dict[str, Any], tables: Mapping[str, pd.DataFrame]) -> Path:
        """要約シートと表ごとのシートを持つブックを書き出す"""
        wb = openpyxl.Workbook()
        ws = wb.active
        ws.title = "summary"
        ws["A1"] = "評価結果"
        ws["A1"].font = Font(size=14, bold=True)
        row = 3
        for key in ("name", "mae", "rmse", "n_pixels", "removed_pixels", "max_ref"):
            ws.cell(row=row, column=1, value=key).font = Font(bold=True)
            ws.cell(row=row, column=2, value=summary.get(key))
            row += 1

        for title, frame in tables.items():
            sheet = wb.create_sheet(title=title)
            for col, header in enumerate(frame.columns, start=1):
                sheet.cell(row=1, column=col, value=str(header)).font = Font(bold=True)
            for r, values in enumerate(frame.itertuples(index=False), start=2):
                for col, value in enumerate(values, start=1):
                    sheet.cell(row=r, column=col, value=_cell_value(value))

        path = self.out_dir / name
        wb.save(path)
        return path


def _cell_value(value: Any) -> Any:
    if hasattr(value, "item"):
        value = value.item()
    if isinstance(value, float) and value != value:
        return None
    return value
