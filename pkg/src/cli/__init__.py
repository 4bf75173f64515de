# -*- coding: utf-8 -*-
"""
CanopyHeight - コマンドライン パッケージ
"""

from .manifest import RunManifest, ManifestRecorder

__all__ = [
    'RunManifest',
    'ManifestRecorder'
]
