"""
特征金字塔融合
1x1 横向投影 + 自顶向下的 2 倍最近邻上采样相加
"""
from typing import List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.errors import FusionError

PYRAMID_LEVELS = 4


class TopDownFusion(nn.Module):
    """横向连接与自顶向下路径"""

    def __init__(self, in_channels: Sequence[int], out_channels: int, smoothing: bool = False):
        """
        Args:
            in_channels: 四个阶段的通道数（由浅到深）
            out_channels: 金字塔通道数 d
            smoothing: 是否在融合后追加 3x3 平滑卷积
        """
        super().__init__()
        if len(in_channels) != PYRAMID_LEVELS:
            raise FusionError(f"需要 {PYRAMID_LEVELS} 个阶段的通道数，实际为 {len(in_channels)}")
        self.out_channels = out_channels

        self.laterals = nn.ModuleList(
            nn.Conv2d(c, out_channels, kernel_size=1) for c in in_channels
        )
        for lateral in self.laterals:
            nn.init.kaiming_uniform_(lateral.weight, a=1)
            nn.init.zeros_(lateral.bias)

        self.smooth = None
        if smoothing:
            self.smooth = nn.ModuleList(
                nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)
                for _ in range(PYRAMID_LEVELS)
            )

    def forward(self, stages: List[torch.Tensor]) -> List[torch.Tensor]:
        """
        Args:
            stages: conv2~conv5 特征图，由浅到深

        Returns:
            List[torch.Tensor]: P2~P5，每层 d 个通道
        """
        if len(stages) != PYRAMID_LEVELS:
            raise FusionError(f"需要 {PYRAMID_LEVELS} 个阶段特征，实际为 {len(stages)}")

        laterals = [lateral(stage) for lateral, stage in zip(self.laterals, stages)]
        for level, projected in enumerate(laterals):
            if projected.shape[-3] != self.out_channels:
                raise FusionError(f"第 {level} 层投影后通道数为 {projected.shape[-3]}，应为 {self.out_channels}")

        # 最深层没有融合项
        levels = [None] * PYRAMID_LEVELS
        levels[-1] = laterals[-1]
        for level in range(PYRAMID_LEVELS - 2, -1, -1):
            upsampled = F.interpolate(levels[level + 1], scale_factor=2, mode="nearest")
            height, width = laterals[level].shape[-2:]
            if upsampled.shape[-2] < height or upsampled.shape[-1] < width:
                raise FusionError(
                    f"第 {level} 层尺寸 {height}x{width} 大于上层上采样结果 "
                    f"{upsampled.shape[-2]}x{upsampled.shape[-1]}"
                )
            # stride 32 层向上取整时裁掉多出的一行/列
            levels[level] = laterals[level] + upsampled[..., :height, :width]

        if self.smooth is not None:
            levels = [conv(level) for conv, level in zip(self.smooth, levels)]
        return levels
