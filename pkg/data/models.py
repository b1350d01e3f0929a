"""
数据集数据模型
样本记录、数据集清单以及表情分布
"""
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.tasks import ALL_TASKS, EXPRESSION_NAMES, NUM_EXPRESSIONS, Task
from losses.models import TargetSet


class Source(Enum):
    """样本来源数据集"""
    AFFWILD2 = "affwild2-like"
    EXPW = "expw-like"
    AFFECTNET = "affectnet-like"
    SYNTHETIC = "synthetic"


class Provenance(Enum):
    """标签来源：真实标注 / 教师预测 / 缺失"""
    GT = "gt"
    TEACHER = "teacher"
    ABSENT = "absent"


class SampleRecord(BaseModel):
    """单张图像及其各任务的可选标签"""
    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    image_path: str
    source: Source = Source.SYNTHETIC
    targets: TargetSet = Field(default_factory=TargetSet)
    provenance: Dict[Task, Provenance] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_provenance(self) -> "SampleRecord":
        # 未显式给出的来源由标签是否存在推导
        for task in ALL_TASKS:
            if task not in self.provenance:
                self.provenance[task] = Provenance.GT if self.targets.has(task) else Provenance.ABSENT
            absent = self.provenance[task] == Provenance.ABSENT
            if absent == self.targets.has(task):
                raise ValueError(
                    f"样本 {self.id} 的 {task.value} 标签来源为 {self.provenance[task].value}，与标签是否存在不一致"
                )
        return self

    def has(self, task: Task) -> bool:
        return self.targets.has(task)

    def origin(self, task: Task) -> Provenance:
        return self.provenance[task]

    @property
    def fully_labeled(self) -> bool:
        return all(self.targets.mask)

    def missing_tasks(self) -> List[Task]:
        return [task for task in ALL_TASKS if not self.has(task)]


class DatasetManifest(BaseModel):
    """
    有序的样本清单

    root 为相对图像路径的基准目录（通常是清单文件所在目录），None 表示当前工作目录。
    """
    records: List[SampleRecord] = Field(default_factory=list)
    num_expressions: int = Field(default=NUM_EXPRESSIONS, ge=2)
    num_aus: int = Field(default=12, ge=1)
    root: Optional[str] = None

    @model_validator(mode="after")
    def _check_records(self) -> "DatasetManifest":
        seen = set()
        for record in self.records:
            if record.id in seen:
                raise ValueError(f"样本ID重复: {record.id}")
            seen.add(record.id)
            expr = record.targets.expr
            if isinstance(expr, int) and expr >= self.num_expressions:
                raise ValueError(f"样本 {record.id} 的表情类别 {expr} 超出范围 [0, {self.num_expressions})")
            if isinstance(expr, list) and len(expr) != self.num_expressions:
                raise ValueError(f"样本 {record.id} 的表情分布长度 {len(expr)} 与类别数不一致")
            if record.targets.au is not None and len(record.targets.au) != self.num_aus:
                raise ValueError(f"样本 {record.id} 的 AU 数量 {len(record.targets.au)} 与 K={self.num_aus} 不一致")
        return self

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> List[str]:
        return [r.id for r in self.records]

    @property
    def coverage(self) -> Dict[Task, int]:
        """各任务有标签的样本数"""
        return {task: sum(1 for r in self.records if r.has(task)) for task in ALL_TASKS}

    def provenance_counts(self, task: Task) -> Dict[Provenance, int]:
        counts = {p: 0 for p in Provenance}
        for record in self.records:
            counts[record.origin(task)] += 1
        return counts

    @property
    def class_histogram(self) -> List[int]:
        """表情类别直方图（软标签按最大概率类别计数）"""
        histogram = [0] * self.num_expressions
        for record in self.records:
            expr = record.targets.expr
            if expr is None:
                continue
            if isinstance(expr, list):
                expr = max(range(len(expr)), key=lambda c: expr[c])
            histogram[expr] += 1
        return histogram

    def resolve_path(self, record: SampleRecord) -> Path:
        """图像的实际路径"""
        path = Path(record.image_path)
        if path.is_absolute() or self.root is None:
            return path
        return Path(self.root) / path

    def subset(self, records: List[SampleRecord]) -> "DatasetManifest":
        """保持 K、类别数和根目录，替换记录"""
        return DatasetManifest(
            records=records, num_expressions=self.num_expressions, num_aus=self.num_aus, root=self.root
        )

    def with_task(self, task: Task, provenance: Optional[Provenance] = None) -> "DatasetManifest":
        """筛选出某任务有标签（可限定来源）的样本"""
        return self.subset([
            r for r in self.records
            if r.has(task) and (provenance is None or r.origin(task) == provenance)
        ])


class ExpressionDistribution(BaseModel):
    """表情类别分布"""
    counts: List[int]
    names: List[str] = Field(default_factory=lambda: list(EXPRESSION_NAMES))

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def proportions(self) -> List[float]:
        total = self.total
        if total == 0:
            return [0.0] * len(self.counts)
        return [c / total for c in self.counts]

    def to_table(self) -> str:
        """分隔文本表格: class,name,count,proportion"""
        lines = ["class,name,count,proportion"]
        for index, (count, proportion) in enumerate(zip(self.counts, self.proportions)):
            name = self.names[index] if index < len(self.names) else str(index)
            lines.append(f"{index},{name},{count},{proportion!r}")
        return "\n".join(lines) + "\n"
