# -*- coding: utf-8 -*-
"""
日付処理ユーティリティ
"""

from datetime import date, datetime, timedelta, timezone
from typing import Iterable, List

from dateutil import parser as date_parser

from core.errors import DataError


class DateUtils:
    """撮影日の解析・整形・並べ替え"""

    @staticmethod
    def get_now_utc() -> datetime:
        """現在の日時（UTC）を取得"""
        return datetime.now(timezone.utc)

    @staticmethod
    def parse_acquisition_date(date_str: str) -> date:
        """
        ISO-8601 の撮影日を解析

        Args:
            date_str: 日付文字列（例: 2017-01-23）

        Returns:
            date: 解析された日付

        Raises:
            DataError: ISO-8601 として解釈できない場合
        """
        try:
            return date_parser.isoparse(date_str).date()
        except (ValueError, TypeError) as e:
            raise DataError(f"撮影日を解析できません: {date_str!r}") from e

    @staticmethod
    def format_date(target_date: date, format_str: str = "%Y-%m-%d") -> str:
        """日付をフォーマット"""
        return target_date.strftime(format_str)

    @staticmethod
    def normalize(date_str: str) -> str:
        """撮影日を YYYY-MM-DD に正規化"""
        return DateUtils.format_date(DateUtils.parse_acquisition_date(date_str))

    @staticmethod
    def revisit_series(start: str, count: int, revisit_days: int) -> List[str]:
        """
        一定間隔の撮影日列を生成

        Args:
            start: 最初の撮影日
            count: 撮影回数
            revisit_days: 回帰日数
        """
        first = DateUtils.parse_acquisition_date(start)
        return [DateUtils.format_date(first + timedelta(days=revisit_days * i))
                for i in range(count)]

    @staticmethod
    def sort_key(date_str: str) -> date:
        """撮影日でソートするためのキー"""
        return DateUtils.parse_acquisition_date(date_str)

    @staticmethod
    def assert_unique(dates: Iterable[str]):
        """撮影日の重複を検査"""
        seen = set()
        for value in dates:
            key = DateUtils.parse_acquisition_date(value)
            if key in seen:
                raise DataError(f"撮影日が重複しています: {value}")
            seen.add(key)
