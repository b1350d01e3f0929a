"""
特征层贡献分析
对每个任务头，把权重按金字塔层切片求绝对值之和，再乘以该层池化前的相对空间面积
"""
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from pydantic import BaseModel, Field, model_validator  # noqa: E402

from core.errors import AnalysisError, DataIOError  # noqa: E402
from core.logger import logger  # noqa: E402
from core.tasks import ALL_TASKS  # noqa: E402
from model.fpn import PYRAMID_LEVELS  # noqa: E402
from model.network import PYRAMID_STRIDES, AffectFPN  # noqa: E402
from training.checkpoint import load_checkpoint  # noqa: E402

PathLike = Union[str, Path]

INTERPRETATION = (
    "relative size = level's nominal pre-pooling spatial area fraction "
    "(1/stride^2 normalized over the four levels); bias excluded"
)


def spatial_fractions() -> List[float]:
    """各层名义空间面积占比，(256, 64, 16, 4) / 340"""
    deepest = PYRAMID_STRIDES[-1]
    areas = [(deepest // stride) ** 2 for stride in PYRAMID_STRIDES]
    total = sum(areas)
    return [area / total for area in areas]


class ContributionReport(BaseModel):
    """每个任务头在四个金字塔层上的贡献"""
    scores: Dict[str, List[float]]
    normalized: Dict[str, List[float]]
    spatial_fractions: List[float] = Field(default_factory=spatial_fractions)
    interpretation: str = INTERPRETATION

    @model_validator(mode="after")
    def _check_scores(self) -> "ContributionReport":
        for head, values in self.scores.items():
            if len(values) != PYRAMID_LEVELS or any(v < 0 for v in values):
                raise ValueError(f"{head} 头的贡献必须是 {PYRAMID_LEVELS} 个非负数")
            normalized = self.normalized.get(head, [])
            if len(normalized) != PYRAMID_LEVELS:
                raise ValueError(f"{head} 头缺少归一化贡献")
            if sum(values) > 0 and abs(sum(normalized) - 1.0) > 1e-9:
                raise ValueError(f"{head} 头的归一化贡献之和不为 1")
        return self

    @classmethod
    def from_scores(cls, scores: Dict[str, List[float]]) -> "ContributionReport":
        normalized = {}
        for head, values in scores.items():
            total = sum(values)
            normalized[head] = [v / total for v in values] if total > 0 else [0.0] * len(values)
        return cls(scores=scores, normalized=normalized)

    def to_table(self) -> str:
        """分隔文本: head,level,contribution,normalized"""
        lines = ["head,level,contribution,normalized"]
        for head, values in self.scores.items():
            for level, (value, share) in enumerate(zip(values, self.normalized[head])):
                lines.append(f"{head},{level},{value!r},{share!r}")
        return "\n".join(lines) + "\n"


def _head_weights(state_dict: Dict[str, torch.Tensor], concat_length: int) -> Dict[str, torch.Tensor]:
    """取出三个仿射头的权重矩阵，结构不符时报错"""
    weights = {}
    for task in ALL_TASKS:
        prefix = f"heads.{task.value}."
        keys = {name[len(prefix):] for name in state_dict if name.startswith(prefix)}
        if "weight" not in keys or not keys <= {"weight", "bias"}:
            raise AnalysisError(f"{task.value} 头不是单层仿射映射: {sorted(keys)}")
        weight = state_dict[prefix + "weight"]
        if weight.dim() != 2 or weight.shape[1] != concat_length:
            raise AnalysisError(
                f"{task.value} 头权重形状 {tuple(weight.shape)} 与拼接特征长度 {concat_length} 不符"
            )
        weights[task.value] = weight.detach().double().cpu()
    return weights


def layer_contribution(source: Union[AffectFPN, PathLike]) -> ContributionReport:
    """
    计算每个任务头对四个金字塔层的贡献

    C(h, ℓ) = (第 ℓ 层 d 维切片上 |w| 之和) × r_ℓ，偏置不计入。

    Args:
        source: 模型或检查点路径

    Returns:
        ContributionReport: 贡献报告
    """
    model = source if isinstance(source, AffectFPN) else load_checkpoint(source)[0]
    d = model.config.pyramid_channels
    weights = _head_weights(model.state_dict(), model.config.concat_length)
    fractions = spatial_fractions()

    scores = {}
    for head, weight in weights.items():
        scores[head] = [
            float(weight[:, level * d:(level + 1) * d].abs().sum()) * fractions[level]
            for level in range(PYRAMID_LEVELS)
        ]
    report = ContributionReport.from_scores(scores)
    for head in scores:
        logger.info(f"特征层贡献 | head={head} normalized={[round(v, 4) for v in report.normalized[head]]}")
    return report


def emit_contribution_plot(
    report: ContributionReport,
    path: PathLike,
    table_path: Optional[PathLike] = None,
) -> Tuple[Path, Path]:
    """
    输出分组柱状图（层 × 任务头）和对应表格

    Args:
        report: 贡献报告
        path: 图片路径
        table_path: 表格路径，默认与图片同名的 .csv

    Returns:
        (plot_path, table_path)
    """
    path = Path(path)
    table_path = Path(table_path) if table_path is not None else path.with_suffix(".csv")
    heads = list(report.normalized)
    x = np.arange(PYRAMID_LEVELS)
    width = 0.8 / max(len(heads), 1)

    fig, ax = plt.subplots(figsize=(7, 4))
    for offset, head in enumerate(heads):
        ax.bar(x + offset * width - 0.4 + width / 2, report.normalized[head], width, label=head)
    ax.set_xticks(x)
    ax.set_xticklabels([f"P{level + 2}" for level in range(PYRAMID_LEVELS)])
    ax.set_xlabel("pyramid level")
    ax.set_ylabel("normalized contribution")
    ax.set_title("Feature selection of classification heads", fontsize=10)
    ax.text(0.0, -0.22, report.interpretation, transform=ax.transAxes, fontsize=7)
    if heads:
        ax.legend()
    fig.tight_layout()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=100, metadata={"Software": None})
        table_path.parent.mkdir(parents=True, exist_ok=True)
        table_path.write_text(report.to_table(), encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"贡献分析结果写入失败: {path}: {e}")
    finally:
        plt.close(fig)
    return path, table_path


__all__ = ["ContributionReport", "layer_contribution", "emit_contribution_plot", "spatial_fractions"]
