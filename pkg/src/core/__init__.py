# -*- coding: utf-8 -*-
"""
CanopyHeight - コア パッケージ

各モジュールは `from core.<module> import ...` で直接読み込む。
"""
