"""
随机种子工具
所有随机性都来自同一个种子，子系统种子由 (种子, 用途标签) 稳定哈希得到
"""

import hashlib

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    """SHA-256("{seed}:{label}") 的前8字节（大端），截为63位"""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """按用途标签派生的独立随机数生成器"""
    return np.random.default_rng(derive_seed(seed, label))
