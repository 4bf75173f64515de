# -*- coding: utf-8 -*-
"""
CanopyHeight - 衛星画像からの樹高推定ツールキット - srcパッケージ
"""

__version__ = "1.0.0"
__author__ = "CanopyHeight Team"
__description__ = "Sentinel-2 画像から画素ごとの樹高を回帰するツールキット"
