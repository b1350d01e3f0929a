"""
梯度校验
在双精度下比较多任务损失的解析梯度与中心有限差分
"""
from typing import Callable, Dict, List, Optional, Tuple

import torch
from pydantic import BaseModel

from core.config import BackboneVariant, ModelConfig
from core.logger import kv, logger
from core.tasks import ALL_TASKS, Task
from losses.functional import loss_multi
from losses.models import LossWeights, TargetBatch
from model.network import AffectFPN, MultiTaskPrediction

LossFn = Callable[[MultiTaskPrediction, TargetBatch, LossWeights], torch.Tensor]


class TensorCheck(BaseModel):
    """单个参数张量的校验结果"""
    name: str
    checked: int
    numel: int
    relative_error: float
    max_abs_error: float
    passed: bool


class GradientCheckReport(BaseModel):
    """梯度校验报告"""
    step: float
    tolerance: float
    max_relative_error: float
    passed: bool
    tensors: List[TensorCheck]

    @property
    def failed_tensors(self) -> List[str]:
        return [t.name for t in self.tensors if not t.passed]

    def head_passed(self, task: Task) -> bool:
        prefix = f"heads.{task.value}."
        return all(t.passed for t in self.tensors if t.name.startswith(prefix))

    def failed_heads(self) -> List[Task]:
        return [task for task in ALL_TASKS if not self.head_passed(task)]

    def to_text(self) -> str:
        lines = ["name,checked,numel,relative_error,max_abs_error,passed"]
        for t in self.tensors:
            lines.append(f"{t.name},{t.checked},{t.numel},{t.relative_error!r},{t.max_abs_error!r},{t.passed}")
        return "\n".join(lines) + "\n"


def default_loss(pred: MultiTaskPrediction, targets: TargetBatch, weights: LossWeights) -> torch.Tensor:
    return loss_multi(pred, targets, weights)[0]


def gradcheck_model_config(**overrides) -> ModelConfig:
    """梯度校验默认使用的小模型：tiny 骨干，d=8，32x32 输入"""
    values = dict(backbone_variant=BackboneVariant.TINY, pyramid_channels=8, input_size=(32, 32))
    values.update(overrides)
    return ModelConfig(**values)


def random_batch(
    config: ModelConfig,
    batch_size: int = 2,
    seed: int = 0,
    masks: Optional[Dict[Task, List[bool]]] = None,
) -> Tuple[torch.Tensor, TargetBatch]:
    """
    生成随机的双精度图像和软目标

    Args:
        config: 模型配置
        batch_size: 样本数
        seed: 随机种子
        masks: 每个任务的样本掩码，默认全部为 True
    """
    generator = torch.Generator().manual_seed(seed)
    height, width = config.input_size
    images = torch.randn(batch_size, 3, height, width, generator=generator, dtype=torch.float64)
    expr = torch.rand(batch_size, config.num_expressions, generator=generator, dtype=torch.float64)
    masks = masks or {}

    def mask(task: Task) -> torch.Tensor:
        return torch.tensor(masks.get(task, [True] * batch_size), dtype=torch.bool)

    targets = TargetBatch(
        va=torch.rand(batch_size, 2, generator=generator, dtype=torch.float64) * 2 - 1,
        expr=expr / expr.sum(dim=-1, keepdim=True),
        au=torch.rand(batch_size, config.num_aus, generator=generator, dtype=torch.float64),
        va_mask=mask(Task.VA),
        expr_mask=mask(Task.EXPR),
        au_mask=mask(Task.AU),
    )
    return images, targets


def gradient_check(
    model_config: Optional[ModelConfig] = None,
    images: Optional[torch.Tensor] = None,
    targets: Optional[TargetBatch] = None,
    weights: Optional[LossWeights] = None,
    step: float = 1e-3,
    tolerance: float = 1e-4,
    elements_per_tensor: Optional[int] = None,
    analytic_loss: Optional[LossFn] = None,
    model: Optional[AffectFPN] = None,
    seed: int = 0,
) -> GradientCheckReport:
    """
    比较每个可训练参数张量的解析梯度与中心差分 (f(θ+h) - f(θ-h)) / 2h

    张量的相对误差为 ‖g_fd - g_an‖ / max(‖g_fd‖, ‖g_an‖)，两者都为 0 时记为 0。

    Args:
        model_config: 模型配置，默认 gradcheck_model_config()
        images / targets: 样本批，默认 random_batch()
        weights: 损失权重
        step: 差分步长 h
        tolerance: 相对误差阈值
        elements_per_tensor: 每个张量随机抽查的元素数，None 表示全部元素
        analytic_loss: 计算解析梯度时使用的损失（用于故障注入），默认与差分一致
        model: 直接给出的模型，优先于 model_config
        seed: 随机种子

    Returns:
        GradientCheckReport: 校验报告（只报告，不抛出）
    """
    config = model.config if model is not None else (model_config or gradcheck_model_config())
    model = model if model is not None else AffectFPN(config)
    model = model.double()
    model.eval()
    weights = weights or LossWeights()
    if images is None or targets is None:
        images, targets = random_batch(config, seed=seed)
    images = images.double()
    targets = targets.to(dtype=torch.float64)
    analytic_loss = analytic_loss or default_loss

    params = {name: p for name, p in model.named_parameters() if p.requires_grad}
    model.zero_grad(set_to_none=True)
    analytic_loss(model(images), targets, weights).backward()
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params.items()
    }

    generator = torch.Generator().manual_seed(seed)
    checks = []
    with torch.no_grad():
        def reference() -> float:
            return float(default_loss(model(images), targets, weights))

        for name, param in params.items():
            flat = param.view(-1)
            if elements_per_tensor is not None and elements_per_tensor < flat.numel():
                index = torch.randperm(flat.numel(), generator=generator)[:elements_per_tensor]
            else:
                index = torch.arange(flat.numel())

            numeric = torch.zeros(len(index), dtype=torch.float64)
            for slot, i in enumerate(index.tolist()):
                original = float(flat[i])
                flat[i] = original + step
                upper = reference()
                flat[i] = original - step
                lower = reference()
                flat[i] = original
                numeric[slot] = (upper - lower) / (2 * step)

            expected = analytic[name].view(-1)[index]
            diff = float(torch.linalg.vector_norm(numeric - expected))
            scale = max(float(torch.linalg.vector_norm(numeric)), float(torch.linalg.vector_norm(expected)))
            relative = 0.0 if scale == 0.0 else diff / scale
            checks.append(TensorCheck(
                name=name,
                checked=len(index),
                numel=flat.numel(),
                relative_error=relative,
                max_abs_error=float((numeric - expected).abs().max()) if len(index) else 0.0,
                passed=relative < tolerance,
            ))

    max_error = max((c.relative_error for c in checks), default=0.0)
    report = GradientCheckReport(
        step=step, tolerance=tolerance, max_relative_error=max_error,
        passed=all(c.passed for c in checks), tensors=checks,
    )
    logger.info(
        "梯度校验完成 | " + kv(
            tensors=len(checks), max_relative_error=max_error, passed=report.passed,
            failed=",".join(report.failed_tensors) or "none",
        )
    )
    return report
