"""
任务与标签常量
三个情感分析任务、七类基本表情以及动作单元的约定
"""
from enum import Enum
from typing import Dict, List, Tuple


class Task(Enum):
    """情感分析任务枚举"""
    VA = "va"      # 效价-唤醒度回归
    EXPR = "expr"  # 基本表情分类
    AU = "au"      # 面部动作单元检测


ALL_TASKS: Tuple[Task, ...] = (Task.VA, Task.EXPR, Task.AU)


class Expression(Enum):
    """七类基本表情（与 Aff-Wild2 标注顺序一致）"""
    ANGER = 0
    DISGUST = 1
    FEAR = 2
    HAPPINESS = 3
    SADNESS = 4
    SURPRISE = 5
    NEUTRAL = 6


NUM_EXPRESSIONS = len(Expression)

EXPRESSION_NAMES: List[str] = [e.name.capitalize() for e in Expression]

# ABAW 挑战赛使用的 12 个动作单元
DEFAULT_AU_NAMES: List[str] = [
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10",
    "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
]

# 每类表情对应的效价-唤醒度锚点
EXPRESSION_VA_ANCHORS: Dict[Expression, Tuple[float, float]] = {
    Expression.ANGER: (-0.6, 0.7),
    Expression.DISGUST: (-0.65, 0.35),
    Expression.FEAR: (-0.45, 0.8),
    Expression.HAPPINESS: (0.8, 0.5),
    Expression.SADNESS: (-0.7, -0.4),
    Expression.SURPRISE: (0.3, 0.85),
    Expression.NEUTRAL: (0.0, 0.0),
}

# 每类表情激活的动作单元（参考 EMFACS，例如 AU6+AU12 对应高兴）
EXPRESSION_AU_TEMPLATES: Dict[Expression, List[str]] = {
    Expression.ANGER: ["AU4", "AU7", "AU23", "AU24"],
    Expression.DISGUST: ["AU4", "AU10", "AU15"],
    Expression.FEAR: ["AU1", "AU2", "AU4", "AU25", "AU26"],
    Expression.HAPPINESS: ["AU6", "AU12", "AU25"],
    Expression.SADNESS: ["AU1", "AU4", "AU15"],
    Expression.SURPRISE: ["AU1", "AU2", "AU25", "AU26"],
    Expression.NEUTRAL: [],
}
