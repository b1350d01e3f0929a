"""
教师-学生标签补全数据模型
"""
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator

from core.errors import DataIOError, InputValidationError, ManifestParseError
from core.tasks import NUM_EXPRESSIONS, Task
from losses.models import PROBABILITY_TOLERANCE
from model.network import AffectFPN

PathLike = Union[str, Path]
COMPLETED_BASE_COLUMNS = ["id", "task", "valence", "arousal", "expr"]


class TeacherModel(BaseModel):
    """只激活单个任务头的教师模型"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    task: Task
    model: AffectFPN
    training_manifest_digest: str
    checkpoint_path: Optional[str] = None

    @model_validator(mode="after")
    def _check_single_head(self) -> "TeacherModel":
        if self.model.active_tasks != [self.task]:
            raise ValueError(
                f"教师模型只能激活 {self.task.value} 头，实际为 {[t.value for t in self.model.active_tasks]}"
            )
        return self

    @property
    def teacher_id(self) -> str:
        return f"{self.task.value}-{self.training_manifest_digest[:12]}"


class CompletedEntry(BaseModel):
    """一个 (样本, 任务) 的教师预测"""
    id: str
    task: Task
    value: Union[int, Tuple[float, float], List[float]]
    teacher_id: str

    @model_validator(mode="after")
    def _check_value(self) -> "CompletedEntry":
        value = self.value
        if self.task == Task.VA:
            if isinstance(value, int) or len(value) != 2:
                raise ValueError(f"样本 {self.id} 的 VA 补全值必须是二元组")
        elif self.task == Task.EXPR:
            if isinstance(value, list):
                if any(p < 0 or not math.isfinite(p) for p in value):
                    raise ValueError(f"样本 {self.id} 的表情分布含有负数或非有限值")
                if abs(sum(value) - 1.0) > PROBABILITY_TOLERANCE:
                    raise ValueError(f"样本 {self.id} 的表情分布之和不为 1: {sum(value)}")
            elif not isinstance(value, int):
                raise ValueError(f"样本 {self.id} 的表情补全值必须是分布或类别")
        else:
            if isinstance(value, int) or any(not 0.0 <= a <= 1.0 for a in value):
                raise ValueError(f"样本 {self.id} 的 AU 补全值必须位于 [0, 1]")
        return self


class CompletedLabels(BaseModel):
    """
    教师补全的标签

    entries 按清单顺序、再按 VA→EXPR→AU 排列；dropped 为图像读取失败而被丢弃的样本。
    """
    entries: List[CompletedEntry] = Field(default_factory=list)
    dropped: List[str] = Field(default_factory=list)
    num_expressions: int = NUM_EXPRESSIONS
    num_aus: int = 12

    _index: Dict[Tuple[str, Task], CompletedEntry] = PrivateAttr(default_factory=dict)

    def model_post_init(self, __context) -> None:
        for entry in self.entries:
            key = (entry.id, entry.task)
            if key in self._index:
                raise InputValidationError(f"补全标签重复: ({entry.id}, {entry.task.value})")
            self._index[key] = entry

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, sample_id: str, task: Task) -> Optional[CompletedEntry]:
        return self._index.get((sample_id, task))

    def counts(self) -> Dict[Task, int]:
        result = {task: 0 for task in Task}
        for entry in self.entries:
            result[entry.task] += 1
        return result

    def au_columns(self) -> List[str]:
        return [f"au_{j}" for j in range(self.num_aus)]

    def to_frame(self) -> pd.DataFrame:
        """分隔表格: id,task,valence,arousal,expr,au_0..au_{K-1},teacher_id"""
        rows = []
        for entry in self.entries:
            row = {column: "" for column in COMPLETED_BASE_COLUMNS + self.au_columns()}
            row.update(id=entry.id, task=entry.task.value, teacher_id=entry.teacher_id)
            if entry.task == Task.VA:
                row["valence"], row["arousal"] = (repr(float(v)) for v in entry.value)
            elif entry.task == Task.EXPR:
                if isinstance(entry.value, int):
                    row["expr"] = str(entry.value)
                else:
                    row["expr"] = ";".join(repr(float(p)) for p in entry.value)
            else:
                for column, value in zip(self.au_columns(), entry.value):
                    row[column] = repr(float(value))
            rows.append(row)
        columns = COMPLETED_BASE_COLUMNS + self.au_columns() + ["teacher_id"]
        return pd.DataFrame(rows, columns=columns, dtype=str)

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.to_frame().to_csv(path, index=False, lineterminator="\n")
            if self.dropped:
                path.with_suffix(".dropped.txt").write_text("\n".join(self.dropped) + "\n", encoding="utf-8")
        except OSError as e:
            raise DataIOError(f"补全标签写入失败: {path}: {e}")
        return path

    @classmethod
    def load(cls, path: PathLike, num_expressions: int = NUM_EXPRESSIONS) -> "CompletedLabels":
        """读取补全标签文件（以及同名的 .dropped.txt）"""
        path = Path(path)
        if not path.is_file():
            raise DataIOError(f"补全标签文件不存在: {path}")
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        columns = list(frame.columns)
        num_aus = sum(1 for c in columns if c.startswith("au_"))
        expected = COMPLETED_BASE_COLUMNS + [f"au_{j}" for j in range(num_aus)] + ["teacher_id"]
        if columns != expected:
            raise ManifestParseError(f"补全标签表头不符: {','.join(columns)}", row=1)

        entries = []
        for offset, row in enumerate(frame.to_dict(orient="records")):
            line = offset + 2
            try:
                task = Task(row["task"])
                if task == Task.VA:
                    value = (float(row["valence"]), float(row["arousal"]))
                elif task == Task.EXPR:
                    text = row["expr"]
                    value = [float(p) for p in text.split(";")] if ";" in text else int(text)
                else:
                    value = [float(row[f"au_{j}"]) for j in range(num_aus)]
                entries.append(CompletedEntry(id=row["id"], task=task, value=value, teacher_id=row["teacher_id"]))
            except (ValueError, TypeError) as e:
                raise ManifestParseError(f"补全标签无法解析: {e}", row=line) from e

        dropped_path = path.with_suffix(".dropped.txt")
        dropped = []
        if dropped_path.is_file():
            dropped = [line for line in dropped_path.read_text(encoding="utf-8").splitlines() if line]
        return cls(entries=entries, dropped=dropped, num_expressions=num_expressions, num_aus=num_aus)
