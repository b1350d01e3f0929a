"""
教师-学生标签补全流程
1. 每个任务在有该任务真实标签的混合数据上训练单任务教师
2. 教师为缺失该任务标签的样本预测软标签
3. 用补全标签构建全标注的多任务数据集 D_multi
4. 在 D_multi 上训练多任务学生
"""
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import torch
from pydantic import BaseModel, ConfigDict

from core.config import ModelConfig, RunConfig, TrainConfig
from core.errors import CompletenessError, InputValidationError
from core.logger import kv, logger
from core.tasks import ALL_TASKS, Task
from data.manifest import load_manifest, manifest_digest, save_manifest
from data.models import DatasetManifest, Provenance, SampleRecord
from distill.models import CompletedEntry, CompletedLabels, TeacherModel
from losses.models import LossWeights, TargetSet
from metrics.evaluator import write_report
from metrics.models import MetricsReport
from model.network import AffectFPN
from training.checkpoint import load_checkpoint, save_checkpoint
from training.inference import evaluate_model, run_model
from training.trainer import TrainResult, fit

PathLike = Union[str, Path]


def teacher_config(model_config: ModelConfig, task: Task) -> ModelConfig:
    """教师与学生结构相同，只激活一个任务头"""
    return model_config.model_copy(update={"active_tasks": [task]})


def train_teacher(
    task: Task,
    manifest: DatasetManifest,
    model_config: ModelConfig,
    train_config: Optional[TrainConfig] = None,
    weights: Optional[LossWeights] = None,
    val_manifest: Optional[DatasetManifest] = None,
    out_dir: Optional[PathLike] = None,
) -> TeacherModel:
    """
    训练单任务教师

    Args:
        task: 教师负责的任务
        manifest: 混合清单，只使用该任务有真实标签的样本
        model_config: 模型配置（active_tasks 会被替换为 [task]）
        train_config: 训练配置，默认 40 个受限轮次
        weights: 损失权重
        val_manifest: 验证清单，给出时恢复验证得分最优的参数
        out_dir: 输出目录，教师检查点为 out_dir/teacher_<task>.pt

    Returns:
        TeacherModel: 训练好的教师
    """
    task_manifest = manifest.with_task(task, Provenance.GT)
    if len(task_manifest) == 0:
        raise InputValidationError(f"清单中没有 {task.value} 任务的真实标签，无法训练教师")

    digest = manifest_digest(task_manifest)
    logger.info(f"开始训练教师 | task={task.value} n={len(task_manifest)} digest={digest[:12]}")
    model = AffectFPN(teacher_config(model_config, task))
    result = fit(
        model, task_manifest, weights, train_config or TrainConfig(),
        val_manifest=val_manifest, out_dir=out_dir, checkpoint_prefix=f"teacher_{task.value}",
    )
    model = result.model
    if val_manifest is not None and result.best_checkpoint and result.best_epoch != len(result.history) - 1:
        model, _ = load_checkpoint(result.best_checkpoint)
        logger.info(f"教师恢复到验证最优轮次 | task={task.value} epoch={result.best_epoch}")

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = str(Path(out_dir) / f"teacher_{task.value}.pt")
        save_checkpoint(model, checkpoint_path, metadata={"task": task.value, "manifest_digest": digest})
    return TeacherModel(task=task, model=model, training_manifest_digest=digest, checkpoint_path=checkpoint_path)


def load_teacher(path: PathLike) -> TeacherModel:
    """从教师检查点恢复 TeacherModel"""
    model, metadata = load_checkpoint(path)
    if "task" not in metadata or "manifest_digest" not in metadata:
        raise InputValidationError(f"检查点不是教师模型: {path}")
    return TeacherModel(
        task=Task(metadata["task"]), model=model,
        training_manifest_digest=metadata["manifest_digest"], checkpoint_path=str(path),
    )


def load_teachers(teachers_dir: PathLike) -> Dict[Task, TeacherModel]:
    """读取目录下的 teacher_<task>.pt"""
    teachers = {}
    for task in ALL_TASKS:
        path = Path(teachers_dir) / f"teacher_{task.value}.pt"
        if path.is_file():
            teachers[task] = load_teacher(path)
    return teachers


def _teacher_value(task: Task, prediction, row: int, hard: bool):
    if task == Task.VA:
        # 线性 VA 头的输出可能越界，补全值截断到 [-1, 1]
        va = prediction.va[row].double().clamp(-1.0, 1.0)
        return (float(va[0]), float(va[1]))
    if task == Task.EXPR:
        if hard:
            return int(prediction.expr_logits[row].argmax())
        probabilities = torch.softmax(prediction.expr_logits[row].double(), dim=-1)
        return [float(p) for p in probabilities]
    probabilities = torch.sigmoid(prediction.au_logits[row].double())
    if hard:
        return [1.0 if p > 0.5 else 0.0 for p in probabilities.tolist()]
    return [float(p) for p in probabilities]


def complete_labels(
    teachers: Union[Dict[Task, TeacherModel], Iterable[TeacherModel]],
    manifest: DatasetManifest,
    hard: bool = False,
    batch_size: int = 256,
) -> CompletedLabels:
    """
    用教师预测补全缺失标签

    只预测标签缺失的 (样本, 任务)；真实标签不动。图像读取失败的样本整体丢弃并记录。

    Args:
        teachers: 三个任务的教师
        manifest: 待补全的清单
        hard: True 时存储 argmax 类别 / 阈值化后的 AU，而不是软输出
        batch_size: 推理批大小

    Returns:
        CompletedLabels: 补全结果
    """
    if not isinstance(teachers, dict):
        teachers = {t.task: t for t in teachers}
    missing = [task for task in ALL_TASKS if task not in teachers]
    if missing:
        raise InputValidationError(f"缺少教师: {[t.value for t in missing]}")
    for task, teacher in teachers.items():
        if teacher.task != task:
            raise InputValidationError(f"教师任务不匹配: {teacher.task.value} 用于 {task.value}")
        if teacher.model.config.num_aus != manifest.num_aus:
            raise InputValidationError(
                f"教师 {task.value} 的 AU 数量 {teacher.model.config.num_aus} 与清单 K={manifest.num_aus} 不一致"
            )

    found: Dict[Task, Dict[str, object]] = {}
    dropped = set()
    for task in ALL_TASKS:
        pending = manifest.subset([r for r in manifest.records if r.origin(task) == Provenance.ABSENT])
        found[task] = {}
        if len(pending) == 0:
            continue
        ids, prediction, failed = run_model(teachers[task].model, pending, batch_size=batch_size)
        dropped.update(failed)
        for row, sample_id in enumerate(ids):
            found[task][sample_id] = _teacher_value(task, prediction, row, hard)

    entries = []
    for record in manifest.records:
        if record.id in dropped:
            continue
        for task in ALL_TASKS:
            if record.id in found[task]:
                entries.append(CompletedEntry(
                    id=record.id, task=task, value=found[task][record.id], teacher_id=teachers[task].teacher_id,
                ))

    completed = CompletedLabels(
        entries=entries,
        dropped=[r.id for r in manifest.records if r.id in dropped],
        num_expressions=manifest.num_expressions,
        num_aus=manifest.num_aus,
    )
    counts = completed.counts()
    if dropped:
        logger.warning(f"标签补全时丢弃图像读取失败的样本 | count={len(dropped)} ids={completed.dropped[:5]}")
    logger.info(
        "标签补全完成 | " + kv(
            va=counts[Task.VA], expr=counts[Task.EXPR], au=counts[Task.AU], dropped=len(dropped), hard=hard
        )
    )
    return completed


def build_unified(manifest: DatasetManifest, completed: CompletedLabels) -> DatasetManifest:
    """
    构建全标注的多任务数据集 D_multi

    真实标签保持原样；缺失标签由补全结果填入并标记来源为 teacher；丢弃的样本不进入 D_multi。

    Args:
        manifest: 原始清单
        completed: 补全标签

    Returns:
        DatasetManifest: 每条记录三个任务都有标签
    """
    dropped = set(completed.dropped)
    records: List[SampleRecord] = []
    for record in manifest.records:
        if record.id in dropped:
            continue
        values = {"va": record.targets.va, "expr": record.targets.expr, "au": record.targets.au}
        provenance = dict(record.provenance)
        for task in ALL_TASKS:
            if record.has(task):
                continue
            entry = completed.get(record.id, task)
            if entry is None:
                raise CompletenessError(f"缺少补全标签: ({record.id}, {task.value})")
            values[task.value] = entry.value
            provenance[task] = Provenance.TEACHER
        records.append(SampleRecord(
            id=record.id, image_path=record.image_path, source=record.source,
            targets=TargetSet(**values), provenance=provenance,
        ))

    unified = manifest.subset(records)
    teacher_counts = {task: unified.provenance_counts(task)[Provenance.TEACHER] for task in ALL_TASKS}
    logger.info(
        "D_multi 构建完成 | " + kv(
            n=len(unified), teacher_va=teacher_counts[Task.VA], teacher_expr=teacher_counts[Task.EXPR],
            teacher_au=teacher_counts[Task.AU], dropped=len(dropped),
        )
    )
    return unified


def train_student(
    d_multi: DatasetManifest,
    model_config: ModelConfig,
    train_config: Optional[TrainConfig] = None,
    weights: Optional[LossWeights] = None,
    val_manifest: Optional[DatasetManifest] = None,
    out_dir: Optional[PathLike] = None,
) -> TrainResult:
    """
    在 D_multi 上训练多任务学生（三个任务头全部激活）

    Returns:
        TrainResult: 学生模型、训练历史和检查点
    """
    incomplete = [r.id for r in d_multi.records if not r.fully_labeled]
    if incomplete:
        raise InputValidationError(f"D_multi 中有 {len(incomplete)} 个样本标签不完整: {incomplete[:5]}")
    config = model_config.model_copy(update={"active_tasks": list(ALL_TASKS)})
    model = AffectFPN(config)
    result = fit(
        model, d_multi, weights, train_config or TrainConfig.student_defaults(),
        val_manifest=val_manifest, out_dir=out_dir, checkpoint_prefix="student",
    )
    if out_dir is not None:
        save_checkpoint(result.model, Path(out_dir) / "student.pt", metadata={"role": "student"})
    return result


class PipelineResult(BaseModel):
    """完整流程的产物"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    teachers: Dict[Task, TeacherModel]
    completed: CompletedLabels
    d_multi: DatasetManifest
    student: TrainResult
    report: Optional[MetricsReport] = None


def run_pipeline(
    config: RunConfig,
    manifest: Union[DatasetManifest, PathLike],
    val_manifest: Optional[Union[DatasetManifest, PathLike]] = None,
    out_dir: Optional[PathLike] = None,
    hard: bool = False,
) -> PipelineResult:
    """
    依次执行：三个教师 → 标签补全 → 构建 D_multi → 学生训练 → 验证评估

    Args:
        config: 运行配置（model / train / student / loss 节）
        manifest: 训练清单或其路径
        val_manifest: 验证清单或其路径
        out_dir: 输出目录，默认 config.output_dir
        hard: 是否使用硬标签补全

    Returns:
        PipelineResult: 各阶段产物
    """
    out = Path(out_dir or config.output_dir)
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    if val_manifest is not None and not isinstance(val_manifest, DatasetManifest):
        val_manifest = load_manifest(val_manifest)

    teachers = {
        task: train_teacher(
            task, manifest, config.model, config.train, config.loss,
            val_manifest=val_manifest, out_dir=out / "teachers",
        )
        for task in ALL_TASKS
    }
    completed = complete_labels(teachers, manifest, hard=hard)
    completed.save(out / "completed.csv")
    d_multi = build_unified(manifest, completed)
    save_manifest(d_multi, out / "d_multi.csv")

    student = train_student(
        d_multi, config.model, config.student, config.loss, val_manifest=val_manifest, out_dir=out / "student"
    )
    report = None
    if val_manifest is not None:
        report = evaluate_model(student.model, val_manifest)
        write_report(report, out)
    return PipelineResult(teachers=teachers, completed=completed, d_multi=d_multi, student=student, report=report)
