"""
训练循环
子采样轮次、自适应矩估计优化、验证评估与最优/最终检查点
"""
import io
import math
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from core.config import LRSchedule, OptimizerName, TrainConfig
from core.errors import DataIOError, InputValidationError, TrainingError
from core.logger import kv, logger
from core.tasks import Task
from data.dataset import AffectDataset, make_loader, split_batch
from data.models import DatasetManifest
from data.sampler import subsample_epoch
from losses.functional import loss_multi
from losses.models import LossWeights
from metrics.models import MetricsReport
from model.network import AffectFPN
from training.checkpoint import save_checkpoint
from training.inference import evaluate_model

PathLike = Union[str, Path]


class EpochRecord(BaseModel):
    """单个轮次的训练记录"""
    epoch: int
    loss_total: float
    loss_va: float
    loss_expr: float
    loss_au: float
    samples: int
    steps: int
    learning_rate: float
    wall_time: float
    val_score: Optional[float] = None
    val_report: Optional[MetricsReport] = None


class TrainHistory(BaseModel):
    """逐轮次的训练历史"""
    epochs: List[EpochRecord] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def total_losses(self) -> List[float]:
        return [e.loss_total for e in self.epochs]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for record in self.epochs:
            row = record.model_dump(exclude={"val_report"})
            report = record.val_report
            for name in ("s_va", "s_expr", "s_au"):
                row[f"val_{name}"] = getattr(report, name) if report is not None else None
            rows.append(row)
        return pd.DataFrame(rows)

    def to_csv_text(self) -> str:
        buffer = io.StringIO()
        self.to_frame().to_csv(buffer, index=False, lineterminator="\n")
        return buffer.getvalue()

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_csv_text(), encoding="utf-8")
        except OSError as e:
            raise DataIOError(f"训练历史写入失败: {path}: {e}")
        return path


class TrainResult(BaseModel):
    """训练结果：模型、历史和检查点路径"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: AffectFPN
    history: TrainHistory
    best_checkpoint: Optional[str] = None
    last_checkpoint: Optional[str] = None
    best_epoch: Optional[int] = None


def build_optimizer(model: AffectFPN, config: TrainConfig) -> torch.optim.Optimizer:
    """按配置创建 Adam / AdamW，只包含可训练参数"""
    params = list(model.trainable_parameters())
    kwargs = dict(lr=config.learning_rate, betas=tuple(config.betas), eps=config.eps,
                  weight_decay=config.weight_decay)
    if config.optimizer == OptimizerName.ADAMW:
        return torch.optim.AdamW(params, **kwargs)
    return torch.optim.Adam(params, **kwargs)


def build_scheduler(optimizer: torch.optim.Optimizer, config: TrainConfig):
    if config.lr_schedule == LRSchedule.COSINE:
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs)
    return None


def _drop_unsupervised_heads(model: AffectFPN, targets, tasks: List[Task]):
    """批次中某任务全部缺失时清空该任务头的梯度，优化器跳过这些参数"""
    for task in tasks:
        if not bool(targets.mask(task).any()):
            for param in model.head_parameters(task).values():
                param.grad = None


@torch.no_grad()
def evaluate_loss(
    model: AffectFPN,
    manifest: DatasetManifest,
    weights: Optional[LossWeights] = None,
    batch_size: int = 256,
) -> Tuple[float, Tuple[float, float, float]]:
    """
    模型在清单上的平均损失（按样本平均）

    Returns:
        (total, (L_VA, L_EXPR, L_AU))
    """
    weights = (weights or LossWeights()).restricted_to(model.active_tasks)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    dataset = AffectDataset(manifest, image_size=model.config.input_size)
    sums = [0.0, 0.0, 0.0, 0.0]
    count = 0
    for batch in make_loader(dataset, batch_size=batch_size):
        images, targets, _, _ = split_batch(batch)
        if images is None:
            continue
        total, components = loss_multi(model(images.to(dtype)), targets.to(dtype=dtype), weights)
        size = targets.batch_size
        for slot, value in enumerate((total, *components)):
            sums[slot] += float(value) * size
        count += size
    model.train(was_training)
    if count == 0:
        raise InputValidationError("没有可用于计算损失的样本")
    return sums[0] / count, (sums[1] / count, sums[2] / count, sums[3] / count)


def fit(
    model: AffectFPN,
    manifest: DatasetManifest,
    weights: Optional[LossWeights] = None,
    config: Optional[TrainConfig] = None,
    val_manifest: Optional[DatasetManifest] = None,
    out_dir: Optional[PathLike] = None,
    checkpoint_prefix: str = "model",
) -> TrainResult:
    """
    训练模型

    每个轮次用 subsample_epoch 抽取 epoch_fraction 比例的样本，按抽样顺序分批更新；
    给出验证集时按激活任务的挑战赛得分均值保存最优检查点，并始终保存最终检查点。

    Args:
        model: 待训练模型（只训练激活的任务头）
        manifest: 训练清单
        weights: 损失权重，未激活任务的权重会被置 0
        config: 训练配置
        val_manifest: 验证清单
        out_dir: 检查点与训练历史输出目录，None 时不写文件
        checkpoint_prefix: 检查点文件名前缀

    Returns:
        TrainResult: 训练结果
    """
    config = config or TrainConfig()
    if len(manifest) == 0:
        raise InputValidationError("训练清单为空")
    batch_size = config.batch_size
    if batch_size > len(manifest):
        logger.warning(f"批大小大于样本数，改为样本数 | batch_size={batch_size} n={len(manifest)}")
        batch_size = len(manifest)

    tasks = model.active_tasks
    weights = (weights or LossWeights()).restricted_to(tasks)
    dtype = config.dtype
    model.to(dtype)
    model.train()

    dataset = AffectDataset(manifest, image_size=model.config.input_size)
    optimizer = build_optimizer(model, config)
    scheduler = build_scheduler(optimizer, config)
    out_path = Path(out_dir) if out_dir is not None else None

    history = TrainHistory()
    best_score = -math.inf
    best_checkpoint = None
    best_epoch = None
    last_checkpoint = None
    logger.info(
        "开始训练 | " + kv(
            n=len(manifest), tasks=",".join(t.value for t in tasks), epochs=config.epochs,
            fraction=config.epoch_fraction, batch_size=batch_size, lr=config.learning_rate,
            optimizer=config.optimizer.value, precision=config.precision.value,
        )
    )

    for epoch in range(config.epochs):
        started = time.perf_counter()
        indices = subsample_epoch(len(manifest), config.epoch_fraction, config.seed, epoch)
        loader = make_loader(dataset, indices, batch_size=batch_size, num_workers=config.num_workers)
        sums: Dict[str, float] = {"total": 0.0, "va": 0.0, "expr": 0.0, "au": 0.0}
        samples = 0
        steps = 0
        learning_rate = optimizer.param_groups[0]["lr"]

        progress = tqdm(loader, desc=f"epoch {epoch + 1}/{config.epochs}", disable=not config.show_progress)
        for batch in progress:
            images, targets, batch_indices, _ = split_batch(batch)
            if images is None:
                continue
            targets = targets.to(dtype=dtype)
            prediction = model(images.to(dtype))
            total, components = loss_multi(prediction, targets, weights)
            if not torch.isfinite(total):
                batch_ids = dataset.record_ids(batch_indices.tolist())
                logger.error(f"出现非有限损失，训练中止 | epoch={epoch} ids={batch_ids}")
                raise TrainingError(f"第 {epoch} 轮出现非有限损失", batch_ids=batch_ids)

            optimizer.zero_grad(set_to_none=True)
            total.backward()
            _drop_unsupervised_heads(model, targets, tasks)
            if config.grad_clip_norm is not None:
                torch.nn.utils.clip_grad_norm_(
                    [p for p in model.trainable_parameters() if p.grad is not None], config.grad_clip_norm
                )
            optimizer.step()

            size = targets.batch_size
            sums["total"] += float(total.detach()) * size
            for key, value in zip(("va", "expr", "au"), components):
                sums[key] += float(value.detach()) * size
            samples += size
            steps += 1
            progress.set_postfix(loss=f"{float(total.detach()):.4f}")

        if scheduler is not None:
            scheduler.step()
        if samples == 0:
            raise TrainingError(f"第 {epoch} 轮没有可用样本（图像全部读取失败）")

        record = EpochRecord(
            epoch=epoch,
            loss_total=sums["total"] / samples,
            loss_va=sums["va"] / samples,
            loss_expr=sums["expr"] / samples,
            loss_au=sums["au"] / samples,
            samples=samples,
            steps=steps,
            learning_rate=learning_rate,
            wall_time=time.perf_counter() - started,
        )
        if val_manifest is not None:
            report = evaluate_model(model, val_manifest, skip_unreadable=True)
            record.val_report = report
            record.val_score = report.mean_score(tasks) if report is not None else None
            if record.val_score is not None and record.val_score > best_score:
                best_score = record.val_score
                best_epoch = epoch
                if out_path is not None:
                    best_checkpoint = str(out_path / f"{checkpoint_prefix}_best.pt")
                    save_checkpoint(model, best_checkpoint, metadata={"epoch": epoch, "val_score": best_score})
        history.epochs.append(record)
        model.train()

        logger.info(
            "训练轮次完成 | " + kv(
                epoch=epoch, loss_total=record.loss_total, loss_va=record.loss_va,
                loss_expr=record.loss_expr, loss_au=record.loss_au, samples=samples,
                val_score=record.val_score if record.val_score is not None else "none",
            )
        )

    if out_path is not None:
        last_checkpoint = str(out_path / f"{checkpoint_prefix}_last.pt")
        save_checkpoint(model, last_checkpoint, metadata={"epoch": config.epochs - 1})
        history.save(out_path / f"{checkpoint_prefix}_history.csv")
        if best_checkpoint is None:
            best_checkpoint = last_checkpoint
            best_epoch = config.epochs - 1

    return TrainResult(
        model=model, history=history, best_checkpoint=best_checkpoint,
        last_checkpoint=last_checkpoint, best_epoch=best_epoch,
    )


__all__ = ["fit", "evaluate_loss", "TrainHistory", "TrainResult", "EpochRecord"]
