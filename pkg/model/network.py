"""
多任务特征金字塔网络
骨干 → 自顶向下融合 → 全局平均池化 → 拼接 → 三个线性任务头
"""
from typing import Dict, Iterator, List, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict

from core.config import ModelConfig
from core.errors import InputShapeError, InputValidationError
from core.logger import logger
from core.tasks import ALL_TASKS, Task
from model.backbone import BackboneFactory
from model.fpn import PYRAMID_LEVELS, TopDownFusion
from model.heads import TaskHeads

# P2~P5 相对输入的步长
PYRAMID_STRIDES: Tuple[int, ...] = (4, 8, 16, 32)


class MultiTaskPrediction(BaseModel):
    """一次前向得到的三个任务输出（批量）"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    va: torch.Tensor           # (B, 2)
    expr_logits: torch.Tensor  # (B, C)
    au_logits: torch.Tensor    # (B, K)

    @property
    def batch_size(self) -> int:
        return self.va.shape[0]

    def output(self, task: Task) -> torch.Tensor:
        return {Task.VA: self.va, Task.EXPR: self.expr_logits, Task.AU: self.au_logits}[task]

    def expr_probabilities(self) -> torch.Tensor:
        return torch.softmax(self.expr_logits, dim=-1)

    def au_probabilities(self) -> torch.Tensor:
        return torch.sigmoid(self.au_logits)

    def detach(self) -> "MultiTaskPrediction":
        return MultiTaskPrediction(
            va=self.va.detach(), expr_logits=self.expr_logits.detach(), au_logits=self.au_logits.detach()
        )


class PyramidFeatures(BaseModel):
    """金字塔特征：四层特征图、各层池化向量以及拼接向量"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    levels: List[torch.Tensor]
    pooled: List[torch.Tensor]
    concat: torch.Tensor


def pool_and_concat(levels: List[torch.Tensor]) -> Tuple[List[torch.Tensor], torch.Tensor]:
    """
    每层做全局空间平均，再按 P2→P5 顺序拼接

    Args:
        levels: 四层特征图，形状 (d, H, W) 或 (B, d, H, W)

    Returns:
        (pooled, concat)：四个长度为 d 的向量和长度为 4d 的拼接向量
    """
    if len(levels) != PYRAMID_LEVELS:
        raise InputValidationError(f"需要 {PYRAMID_LEVELS} 层特征，实际为 {len(levels)}")
    channels = {level.shape[-3] for level in levels}
    if len(channels) != 1:
        raise InputValidationError(f"各层通道数不一致: {sorted(channels)}")
    pooled = [level.mean(dim=(-2, -1)) for level in levels]
    return pooled, torch.cat(pooled, dim=-1)


def level_spatial_sizes(input_size: Tuple[int, int]) -> List[Tuple[int, int]]:
    """各金字塔层的空间尺寸（stride 32 层向上取整）"""
    height, width = input_size
    return [(-(-height // s), -(-width // s)) for s in PYRAMID_STRIDES]


class AffectFPN(nn.Module):
    """多任务特征金字塔网络"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

        # 初始化与全局随机状态隔离，由配置种子决定
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.backbone = BackboneFactory.create_backbone(config)
            self.fpn = TopDownFusion(
                self.backbone.out_channels, config.pyramid_channels, smoothing=config.fpn_smoothing
            )
            self.heads = TaskHeads(
                config.concat_length, config.num_expressions, config.num_aus, config.va_bounding
            )

        for task in ALL_TASKS:
            if task not in config.active_tasks:
                for param in self.heads.head(task).parameters():
                    param.requires_grad_(False)

        logger.debug(
            f"模型创建完成 | backbone={config.backbone_variant.value} d={config.pyramid_channels} "
            f"active={','.join(t.value for t in config.active_tasks)}"
        )

    @property
    def active_tasks(self) -> List[Task]:
        return list(self.config.active_tasks)

    def validate_images(self, images: torch.Tensor) -> torch.Tensor:
        """校验输入图像并统一为 (B, 3, H, W)"""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3:
            raise InputShapeError(f"输入必须是 3 通道图像，实际形状为 {tuple(images.shape)}")
        expected = tuple(self.config.input_size)
        if tuple(images.shape[-2:]) != expected:
            raise InputShapeError(
                f"输入尺寸 {images.shape[-2]}x{images.shape[-1]} 与配置 {expected[0]}x{expected[1]} 不一致"
            )
        if not torch.isfinite(images).all():
            raise InputValidationError("输入图像含有非有限值")
        return images

    def backbone_forward(self, images: torch.Tensor) -> List[torch.Tensor]:
        """提取 conv2~conv5 阶段特征"""
        return self.backbone(self.validate_images(images))

    def fpn_fuse(self, stages: List[torch.Tensor]) -> List[torch.Tensor]:
        """自顶向下融合得到 P2~P5"""
        return self.fpn(stages)

    def extract_pyramid(self, images: torch.Tensor) -> PyramidFeatures:
        levels = self.fpn_fuse(self.backbone_forward(images))
        pooled, concat = pool_and_concat(levels)
        return PyramidFeatures(levels=levels, pooled=pooled, concat=concat)

    def heads_forward(self, concat: torch.Tensor) -> MultiTaskPrediction:
        """三个线性头"""
        if concat.shape[-1] != self.config.concat_length:
            raise InputValidationError(
                f"拼接特征长度 {concat.shape[-1]} 与 4·d={self.config.concat_length} 不一致"
            )
        if concat.dim() == 1:
            concat = concat.unsqueeze(0)
        va, expr_logits, au_logits = self.heads(concat)
        return MultiTaskPrediction(va=va, expr_logits=expr_logits, au_logits=au_logits)

    def forward(self, images: torch.Tensor) -> MultiTaskPrediction:
        return self.heads_forward(self.extract_pyramid(images).concat)

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        return (p for p in self.parameters() if p.requires_grad)

    def head_parameters(self, task: Task) -> Dict[str, nn.Parameter]:
        prefix = f"heads.{task.value}."
        return {name: p for name, p in self.named_parameters() if name.startswith(prefix)}
