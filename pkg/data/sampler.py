"""
轮次子采样
每个轮次无放回地随机抽取固定比例的样本
"""
import math
from typing import List, Union

import numpy as np

from core.errors import InputValidationError
from data.models import DatasetManifest

# 避免 0.29*100 这类浮点误差导致向下取整少一个
_FLOOR_EPS = 1e-9


def subsample_size(n: int, fraction: float) -> int:
    """⌊fraction·n⌋，至少为 1"""
    return max(1, min(n, math.floor(fraction * n + _FLOOR_EPS)))


def subsample_epoch(
    manifest: Union[DatasetManifest, int],
    fraction: float = 0.25,
    seed: int = 0,
    epoch_index: int = 0,
) -> List[int]:
    """
    抽取一个轮次使用的样本索引

    Args:
        manifest: 清单或样本总数
        fraction: 抽样比例 (0, 1]
        seed: 随机种子
        epoch_index: 轮次编号

    Returns:
        List[int]: 互不相同的索引，顺序即该轮次的遍历顺序
    """
    n = manifest if isinstance(manifest, int) else len(manifest)
    if n <= 0:
        raise InputValidationError("清单为空，无法抽样")
    if not 0.0 < fraction <= 1.0:
        raise InputValidationError(f"抽样比例必须位于 (0, 1]，实际为 {fraction}")
    if epoch_index < 0:
        raise InputValidationError(f"轮次编号不能为负数: {epoch_index}")

    # (seed, epoch) 共同决定随机流，不同轮次相互独立
    rng = np.random.default_rng([seed % (2 ** 32), epoch_index])
    k = subsample_size(n, fraction)
    return rng.permutation(n)[:k].tolist()
