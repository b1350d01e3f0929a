"""
评估指标数据模型
"""
import math
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, model_validator

from core.tasks import Task

# 挑战赛得分的加权系数
VA_WEIGHTS = (0.5, 0.5)
EXPR_WEIGHTS = (0.67, 0.33)
AU_WEIGHTS = (0.5, 0.5)

SCORE_TOLERANCE = 1e-12


class MomentStats(BaseModel):
    """两个序列的总体（1/n）一阶、二阶矩"""
    mean_x: float
    mean_y: float
    var_x: float = Field(ge=0.0)
    var_y: float = Field(ge=0.0)
    cov_xy: float
    n: int = Field(ge=1)

    @model_validator(mode="after")
    def _check_cauchy_schwarz(self) -> "MomentStats":
        if abs(self.cov_xy) > math.sqrt(self.var_x * self.var_y) + 1e-12:
            raise ValueError("协方差超出 Cauchy–Schwarz 上界")
        return self


class MetricsReport(BaseModel):
    """
    完整评估报告

    某任务没有真实标签时，其字段为 None 并记录在 absent_tasks 中（而不是 0）。
    """
    ccc_v: Optional[float] = None
    ccc_a: Optional[float] = None
    s_va: Optional[float] = None
    va_mse: Optional[float] = None
    ccc_degenerate: List[str] = Field(default_factory=list)

    expr_f1: Optional[float] = None
    expr_tacc: Optional[float] = None
    s_expr: Optional[float] = None

    au_af1: Optional[float] = None
    au_tacc: Optional[float] = None
    s_au: Optional[float] = None

    counts: Dict[str, int] = Field(default_factory=dict)
    absent_tasks: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_scores(self) -> "MetricsReport":
        checks = [
            (self.s_va, self.ccc_v, self.ccc_a, VA_WEIGHTS),
            (self.s_expr, self.expr_f1, self.expr_tacc, EXPR_WEIGHTS),
            (self.s_au, self.au_af1, self.au_tacc, AU_WEIGHTS),
        ]
        for score, first, second, (w1, w2) in checks:
            if score is None:
                continue
            if abs(score - (w1 * first + w2 * second)) > SCORE_TOLERANCE:
                raise ValueError("任务得分与分项指标不一致")
        return self

    def score(self, task: Task) -> Optional[float]:
        return {Task.VA: self.s_va, Task.EXPR: self.s_expr, Task.AU: self.s_au}[task]

    def mean_score(self, tasks: List[Task]) -> Optional[float]:
        """指定任务得分的均值，用于挑选最优检查点"""
        values = [self.score(t) for t in tasks if self.score(t) is not None]
        if not values:
            return None
        return sum(values) / len(values)

    def to_key_value(self) -> str:
        """机器可读的 key=value 文本"""
        lines = []
        for name, value in self.model_dump().items():
            if isinstance(value, dict):
                for sub_key, sub_value in sorted(value.items()):
                    lines.append(f"{name}.{sub_key}={sub_value}")
            elif isinstance(value, list):
                lines.append(f"{name}={','.join(value)}")
            else:
                lines.append(f"{name}={'absent' if value is None else repr(value)}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        """人类可读的报告"""
        def fmt(value):
            return "absent" if value is None else f"{value:.4f}"

        lines = [
            "评估报告",
            "=" * 40,
            f"VA    CCC-V={fmt(self.ccc_v)}  CCC-A={fmt(self.ccc_a)}  MSE={fmt(self.va_mse)}  S_VA={fmt(self.s_va)}",
            f"EXPR  F1={fmt(self.expr_f1)}  TAcc={fmt(self.expr_tacc)}  S_EXPR={fmt(self.s_expr)}",
            f"AU    AF1={fmt(self.au_af1)}  TAcc={fmt(self.au_tacc)}  S_AU={fmt(self.s_au)}",
            "样本数: " + ", ".join(f"{k}={v}" for k, v in sorted(self.counts.items())),
        ]
        if self.ccc_degenerate:
            lines.append("退化的 CCC（两序列均为常数）: " + ", ".join(self.ccc_degenerate))
        if self.absent_tasks:
            lines.append("无真实标签的任务: " + ", ".join(self.absent_tasks))
        return "\n".join(lines) + "\n"
