#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
樹高推定ツールキット - メインエントリーポイント
"""

import sys
from pathlib import Path

# プロジェクトルートをパスに追加
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))
sys.path.insert(0, str(project_root / "src"))

from src.app import CanopyHeightApp


def main():
    """メイン関数"""
    sys.exit(CanopyHeightApp().run())


if __name__ == "__main__":
    main()
