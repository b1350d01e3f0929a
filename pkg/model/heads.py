"""
三个任务头：每个头只有一层线性层
"""
from typing import Tuple

import torch
import torch.nn as nn

from core.config import VABounding
from core.tasks import Task


class TaskHeads(nn.Module):
    """VA / EXPR / AU 线性头"""

    def __init__(self, in_features: int, num_expressions: int, num_aus: int, va_bounding: VABounding):
        super().__init__()
        self.in_features = in_features
        self.va_bounding = va_bounding
        self.va = nn.Linear(in_features, 2)
        self.expr = nn.Linear(in_features, num_expressions)
        self.au = nn.Linear(in_features, num_aus)

    def head(self, task: Task) -> nn.Linear:
        return {Task.VA: self.va, Task.EXPR: self.expr, Task.AU: self.au}[task]

    def forward(self, concat: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        va = self.va(concat)
        if self.va_bounding == VABounding.TANH:
            va = torch.tanh(va)
        # AU 头输出原始 logits，sigmoid 在损失/推理阶段处理
        return va, self.expr(concat), self.au(concat)
