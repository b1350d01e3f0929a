"""
多任务损失函数
效价-唤醒度平方误差、表情交叉熵、动作单元二元交叉熵以及加权多任务损失
"""
from typing import Tuple, Union

import torch
import torch.nn.functional as F

from core.errors import DegenerateSampleError, InputValidationError
from core.tasks import Task
from losses.models import LossWeights, TargetBatch


def _require_finite(name: str, tensor: torch.Tensor):
    if not torch.isfinite(tensor).all():
        raise InputValidationError(f"{name} 含有非有限值")


def _require_range(name: str, tensor: torch.Tensor, low: float, high: float):
    if tensor.numel() and (tensor.min() < low or tensor.max() > high):
        raise InputValidationError(f"{name} 必须位于 [{low}, {high}]")


def loss_va(pred_va: torch.Tensor, target_va: torch.Tensor, validate: bool = True) -> torch.Tensor:
    """
    效价-唤醒度损失 (x_v - y_v)^2 + (x_a - y_a)^2

    Args:
        pred_va: 预测值，形状 (2,) 或 (B, 2)
        target_va: 真实值，形状与预测一致，取值 [-1, 1]
        validate: 是否校验输入

    Returns:
        torch.Tensor: 单样本为标量，批量为 (B,)
    """
    pred_va = torch.as_tensor(pred_va)
    target_va = torch.as_tensor(target_va, dtype=pred_va.dtype)
    if validate:
        _require_finite("VA 预测", pred_va)
        _require_finite("VA 目标", target_va)
        _require_range("VA 目标", target_va, -1.0, 1.0)
    return ((pred_va - target_va) ** 2).sum(dim=-1)


def loss_expr(
    logits: torch.Tensor,
    target: Union[int, torch.Tensor],
    validate: bool = True,
) -> torch.Tensor:
    """
    表情交叉熵损失

    硬标签: -x[y] + log Σ_j exp(x[j])；软标签: Σ_c p_c · (-x[c] + log Σ_j exp(x[j]))。
    通过 log_softmax 做 log-sum-exp 数值稳定。

    Args:
        logits: 表情 logits，形状 (C,) 或 (B, C)
        target: 类别索引（整数或整型张量）或与 logits 同形状的概率分布
        validate: 是否校验输入

    Returns:
        torch.Tensor: 单样本为标量，批量为 (B,)
    """
    logits = torch.as_tensor(logits)
    num_classes = logits.shape[-1]
    if validate:
        _require_finite("表情 logits", logits)
    log_probs = torch.log_softmax(logits, dim=-1)

    target = torch.as_tensor(target)
    if target.dtype in (torch.int8, torch.int16, torch.int32, torch.int64, torch.uint8):
        if validate and target.numel() and (target.min() < 0 or target.max() >= num_classes):
            raise InputValidationError(f"表情类别超出范围 [0, {num_classes})")
        index = target.to(torch.long).unsqueeze(-1)
        return -log_probs.gather(-1, index).squeeze(-1)

    target = target.to(log_probs.dtype)
    if validate:
        if target.shape != logits.shape:
            raise InputValidationError(f"软标签形状 {tuple(target.shape)} 与 logits {tuple(logits.shape)} 不一致")
        _require_finite("表情软标签", target)
        _require_range("表情软标签", target, 0.0, 1.0)
    return -(target * log_probs).sum(dim=-1)


def loss_au(logits: torch.Tensor, target: torch.Tensor, validate: bool = True) -> torch.Tensor:
    """
    动作单元二元交叉熵损失

    Σ_j -[y_j·log σ(x_j) + (1-y_j)·log σ(-x_j)]，支持软目标 y_j ∈ [0, 1]。

    Args:
        logits: AU logits，形状 (K,) 或 (B, K)
        target: 目标，形状与 logits 一致
        validate: 是否校验输入

    Returns:
        torch.Tensor: 单样本为标量，批量为 (B,)
    """
    logits = torch.as_tensor(logits)
    target = torch.as_tensor(target, dtype=logits.dtype)
    if validate:
        if target.shape != logits.shape:
            raise InputValidationError(f"AU 目标形状 {tuple(target.shape)} 与 logits {tuple(logits.shape)} 不一致")
        _require_finite("AU logits", logits)
        _require_finite("AU 目标", target)
        _require_range("AU 目标", target, 0.0, 1.0)
    per_label = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    return per_label.sum(dim=-1)


def loss_multi(
    pred,
    targets: TargetBatch,
    weights: LossWeights = None,
    validate: bool = True,
) -> Tuple[torch.Tensor, Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """
    多任务损失 L = α·L_VA + β·L_EXPR + γ·L_AU

    缺失任务贡献严格为 0 且不产生梯度；批量上取样本均值。

    Args:
        pred: MultiTaskPrediction（批量）
        targets: 批量目标
        weights: 损失权重，默认 α=β=γ=1
        validate: 是否校验输入

    Returns:
        (total, (L_VA, L_EXPR, L_AU))：各任务分量未加权
    """
    weights = weights or LossWeights()
    present = targets.va_mask | targets.expr_mask | targets.au_mask
    if not bool(present.all()):
        bad = torch.nonzero(~present).flatten().tolist()
        raise DegenerateSampleError(f"批次中第 {bad} 个样本没有任何任务标签")

    per_sample = {
        Task.VA: loss_va(pred.va, targets.va, validate=validate),
        Task.EXPR: loss_expr(pred.expr_logits, targets.expr, validate=validate),
        Task.AU: loss_au(pred.au_logits, targets.au, validate=validate),
    }

    components = []
    total = None
    for task in (Task.VA, Task.EXPR, Task.AU):
        values = per_sample[task]
        masked = torch.where(targets.mask(task), values, torch.zeros_like(values))
        component = masked.mean()
        components.append(component)
        term = weights.weight(task) * component
        total = term if total is None else total + term

    return total, (components[0], components[1], components[2])
