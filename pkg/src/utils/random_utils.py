# -*- coding: utf-8 -*-
"""
乱数シード管理

すべての乱数は1つの --seed から派生させる。
"""

import zlib

import numpy as np


def derive_seed(seed: int, component: str) -> int:
    """
    コンポーネント名ごとのサブシードを決定的に導出

    Args:
        seed: 基準シード
        component: コンポーネント名（例: "sampler", "init"）

    Returns:
        int: 32bit のサブシード
    """
    tag = zlib.crc32(component.encode("utf-8"))
    sequence = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, tag])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def make_rng(seed: int, component: str) -> np.random.Generator:
    """サブシードから Generator を作成"""
    return np.random.default_rng(derive_seed(seed, component))
