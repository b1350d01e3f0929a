"""
损失相关数据模型
定义损失权重、单样本目标集合以及批量化目标张量
"""
import math
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from core.errors import InputValidationError
from core.tasks import ALL_TASKS, Task

PROBABILITY_TOLERANCE = 1e-6


class LossWeights(BaseModel):
    """多任务损失权重 α、β、γ"""
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(default=1.0, ge=0.0)
    beta: float = Field(default=1.0, ge=0.0)
    gamma: float = Field(default=1.0, ge=0.0)

    @model_validator(mode="after")
    def _check_positive(self) -> "LossWeights":
        if self.alpha == 0 and self.beta == 0 and self.gamma == 0:
            raise ValueError("α、β、γ 至少有一个需要大于 0")
        return self

    def weight(self, task: Task) -> float:
        return {Task.VA: self.alpha, Task.EXPR: self.beta, Task.AU: self.gamma}[task]

    def restricted_to(self, tasks: Iterable[Task]) -> "LossWeights":
        """只保留指定任务的权重，其余置 0"""
        keep = set(tasks)
        return LossWeights(
            alpha=self.alpha if Task.VA in keep else 0.0,
            beta=self.beta if Task.EXPR in keep else 0.0,
            gamma=self.gamma if Task.AU in keep else 0.0,
        )


class TargetSet(BaseModel):
    """
    单个样本的多任务目标

    缺失的任务为 None，掩码由是否存在目标推导，二者始终一致。
    表情目标可以是类别索引，也可以是概率分布（软标签）。
    """
    va: Optional[Tuple[float, float]] = None
    expr: Optional[Union[int, List[float]]] = None
    au: Optional[List[float]] = None

    @field_validator("va")
    @classmethod
    def _check_va(cls, v):
        if v is None:
            return v
        for value in v:
            if not math.isfinite(value) or not -1.0 <= value <= 1.0:
                raise ValueError(f"效价/唤醒度必须位于 [-1, 1]，实际为 {value}")
        return v

    @field_validator("expr")
    @classmethod
    def _check_expr(cls, v):
        if v is None:
            return v
        if isinstance(v, int):
            if v < 0:
                raise ValueError(f"表情类别不能为负数: {v}")
            return v
        if any((not math.isfinite(p)) or p < 0.0 for p in v):
            raise ValueError("表情概率分布含有负数或非有限值")
        if abs(sum(v) - 1.0) > PROBABILITY_TOLERANCE:
            raise ValueError(f"表情概率分布之和必须为 1，实际为 {sum(v)}")
        return v

    @field_validator("au")
    @classmethod
    def _check_au(cls, v):
        if v is None:
            return v
        for value in v:
            if not math.isfinite(value) or not 0.0 <= value <= 1.0:
                raise ValueError(f"动作单元目标必须位于 [0, 1]，实际为 {value}")
        return v

    @property
    def mask(self) -> Tuple[bool, bool, bool]:
        return (self.va is not None, self.expr is not None, self.au is not None)

    def has(self, task: Task) -> bool:
        return self.get(task) is not None

    def get(self, task: Task):
        return {Task.VA: self.va, Task.EXPR: self.expr, Task.AU: self.au}[task]

    @property
    def is_soft_expr(self) -> bool:
        return isinstance(self.expr, list)


class TargetBatch(BaseModel):
    """批量化后的目标张量，缺失位置用有限的占位值填充"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    va: torch.Tensor          # (B, 2)
    expr: torch.Tensor        # (B, C) 概率分布
    au: torch.Tensor          # (B, K)
    va_mask: torch.Tensor     # (B,) bool
    expr_mask: torch.Tensor   # (B,) bool
    au_mask: torch.Tensor     # (B,) bool

    @property
    def batch_size(self) -> int:
        return self.va.shape[0]

    def mask(self, task: Task) -> torch.Tensor:
        return {Task.VA: self.va_mask, Task.EXPR: self.expr_mask, Task.AU: self.au_mask}[task]

    def to(self, dtype: Optional[torch.dtype] = None, device: Optional[Union[str, torch.device]] = None) -> "TargetBatch":
        """转换浮点精度与设备，掩码保持布尔类型"""
        def move(t: torch.Tensor, floating: bool) -> torch.Tensor:
            return t.to(device=device, dtype=dtype if floating else None)

        return TargetBatch(
            va=move(self.va, True), expr=move(self.expr, True), au=move(self.au, True),
            va_mask=move(self.va_mask, False), expr_mask=move(self.expr_mask, False),
            au_mask=move(self.au_mask, False),
        )

    def select(self, index: Union[Sequence[int], torch.Tensor]) -> "TargetBatch":
        index = torch.as_tensor(index, dtype=torch.long)
        return TargetBatch(**{name: getattr(self, name)[index] for name in type(self).model_fields})

    @classmethod
    def from_collated(cls, batch: Dict[str, torch.Tensor]) -> "TargetBatch":
        """从 DataLoader 默认 collate 得到的字典构造"""
        return cls(**{name: batch[name] for name in cls.model_fields})

    @classmethod
    def from_targets(
        cls,
        targets: List[TargetSet],
        num_expressions: int,
        num_aus: int,
        dtype: torch.dtype = torch.float32,
    ) -> "TargetBatch":
        """
        把多个 TargetSet 组装为批量张量

        Args:
            targets: 单样本目标列表
            num_expressions: 表情类别数
            num_aus: 动作单元数量 K
            dtype: 浮点精度

        Returns:
            TargetBatch: 批量目标
        """
        rows = [encode_target(t, num_expressions, num_aus) for t in targets]
        if not rows:
            raise InputValidationError("目标列表为空")
        return cls(
            va=torch.tensor([r["va"] for r in rows], dtype=dtype),
            expr=torch.tensor([r["expr"] for r in rows], dtype=dtype),
            au=torch.tensor([r["au"] for r in rows], dtype=dtype),
            va_mask=torch.tensor([r["va_mask"] for r in rows], dtype=torch.bool),
            expr_mask=torch.tensor([r["expr_mask"] for r in rows], dtype=torch.bool),
            au_mask=torch.tensor([r["au_mask"] for r in rows], dtype=torch.bool),
        )


def encode_target(target: TargetSet, num_expressions: int, num_aus: int) -> Dict[str, object]:
    """
    把单个 TargetSet 编码为定长的数值字段

    缺失任务的占位值：VA 取 (0, 0)，表情取均匀分布，AU 取 0.5。
    """
    if target.va is not None:
        va = [float(target.va[0]), float(target.va[1])]
    else:
        va = [0.0, 0.0]

    if target.expr is None:
        expr = [1.0 / num_expressions] * num_expressions
    elif isinstance(target.expr, int):
        if not 0 <= target.expr < num_expressions:
            raise InputValidationError(f"表情类别 {target.expr} 超出范围 [0, {num_expressions})")
        expr = [0.0] * num_expressions
        expr[target.expr] = 1.0
    else:
        if len(target.expr) != num_expressions:
            raise InputValidationError(f"表情分布长度 {len(target.expr)} 与类别数 {num_expressions} 不一致")
        expr = [float(p) for p in target.expr]

    if target.au is not None:
        if len(target.au) != num_aus:
            raise InputValidationError(f"动作单元目标长度 {len(target.au)} 与 K={num_aus} 不一致")
        au = [float(a) for a in target.au]
    else:
        au = [0.5] * num_aus

    va_mask, expr_mask, au_mask = target.mask
    return {"va": va, "expr": expr, "au": au, "va_mask": va_mask, "expr_mask": expr_mask, "au_mask": au_mask}


__all__ = ["LossWeights", "TargetSet", "TargetBatch", "encode_target", "ALL_TASKS"]
