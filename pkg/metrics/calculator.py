"""
评估指标计算
CCC、混淆矩阵、F1 / 宏平均 F1、总体准确率、AU 平均 F1 以及挑战赛加权得分
"""
from typing import Optional, Sequence, Tuple

import numpy as np

from core.errors import InputValidationError
from core.logger import logger
from metrics.models import AU_WEIGHTS, EXPR_WEIGHTS, VA_WEIGHTS, MomentStats

CCC_DEGENERATE_EPS = 1e-12


def moment_stats(x: Sequence[float], y: Sequence[float]) -> MomentStats:
    """
    计算两个序列的总体矩

    Args:
        x: 预测序列
        y: 真实序列

    Returns:
        MomentStats: 均值、方差、协方差
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise InputValidationError(f"序列长度不一致: {x.size} vs {y.size}")
    if x.size < 2:
        raise InputValidationError(f"CCC 至少需要 2 个样本，实际为 {x.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise InputValidationError("序列含有非有限值")

    mean_x, mean_y = x.mean(), y.mean()
    dx, dy = x - mean_x, y - mean_y
    var_x = float(np.mean(dx * dx))
    var_y = float(np.mean(dy * dy))
    cov_xy = float(np.mean(dx * dy))
    # 数值误差可能让 |cov| 略超过上界
    bound = float(np.sqrt(var_x * var_y))
    cov_xy = float(np.clip(cov_xy, -bound, bound))
    return MomentStats(
        mean_x=float(mean_x), mean_y=float(mean_y), var_x=var_x, var_y=var_y, cov_xy=cov_xy, n=int(x.size)
    )


def ccc_with_flag(x: Sequence[float], y: Sequence[float]) -> Tuple[float, bool]:
    """
    一致性相关系数 2·s_xy / (s_x² + s_y² + (x̄ - ȳ)²)

    Returns:
        (ccc, degenerate)：分母小于 1e-12 时返回 (0.0, True)
    """
    stats = moment_stats(x, y)
    denominator = stats.var_x + stats.var_y + (stats.mean_x - stats.mean_y) ** 2
    if denominator < CCC_DEGENERATE_EPS:
        logger.warning(f"CCC 分母退化，返回 0 | n={stats.n}")
        return 0.0, True
    return 2.0 * stats.cov_xy / denominator, False


def ccc(x: Sequence[float], y: Sequence[float]) -> float:
    """一致性相关系数（退化时为 0）"""
    return ccc_with_flag(x, y)[0]


def confusion_matrix(pred: Sequence[int], true: Sequence[int], num_classes: int) -> np.ndarray:
    """
    混淆矩阵 matrix[t][p]

    Args:
        pred: 预测类别
        true: 真实类别
        num_classes: 类别数 C

    Returns:
        np.ndarray: (C, C) 计数矩阵
    """
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    if pred.shape != true.shape:
        raise InputValidationError(f"预测与真实长度不一致: {pred.size} vs {true.size}")
    for name, values in (("预测", pred), ("真实", true)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise InputValidationError(f"{name}类别超出范围 [0, {num_classes})")
    flat = true.astype(np.int64) * num_classes + pred.astype(np.int64)
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def f1_per_class(cm: np.ndarray) -> np.ndarray:
    """每个类别的 F1，0/0 约定为 0"""
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.size == 0:
        raise InputValidationError(f"混淆矩阵形状无效: {cm.shape}")
    tp = np.diag(cm)
    col = cm.sum(axis=0)
    row = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(col > 0, tp / col, 0.0)
        recall = np.where(row > 0, tp / row, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return f1


def macro_f1(cm: np.ndarray) -> float:
    """宏平均 F1：只对真实标签中出现过的类别取平均"""
    cm = np.asarray(cm)
    f1 = f1_per_class(cm)
    present = cm.sum(axis=1) > 0
    if not present.any():
        raise InputValidationError("混淆矩阵为空")
    return float(f1[present].mean())


def total_accuracy(pred: Sequence, true: Sequence) -> float:
    """总体准确率：正确预测数 / 全部预测数（AU 按每个 (样本, 标签) 计）"""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise InputValidationError(f"形状不一致: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise InputValidationError("输入为空")
    return float(np.count_nonzero(pred == true) / pred.size)


def au_average_f1(pred_bits: np.ndarray, true_bits: np.ndarray) -> float:
    """
    AU 平均 F1：逐列计算正类二分类 F1，再对 K 列取平均

    Args:
        pred_bits: (n, K) 预测 0/1
        true_bits: (n, K) 真实 0/1

    Returns:
        float: 平均 F1
    """
    pred_bits = np.asarray(pred_bits).astype(bool)
    true_bits = np.asarray(true_bits).astype(bool)
    if pred_bits.shape != true_bits.shape or pred_bits.ndim != 2:
        raise InputValidationError(f"形状不一致: {pred_bits.shape} vs {true_bits.shape}")
    if pred_bits.size == 0:
        raise InputValidationError("输入为空")
    tp = np.sum(pred_bits & true_bits, axis=0).astype(np.float64)
    fp = np.sum(pred_bits & ~true_bits, axis=0).astype(np.float64)
    fn = np.sum(~pred_bits & true_bits, axis=0).astype(np.float64)
    denominator = 2 * tp + fp + fn
    with np.errstate(divide="ignore", invalid="ignore"):
        f1 = np.where(denominator > 0, 2 * tp / denominator, 0.0)
    return float(f1.mean())


def binarize_au(probabilities: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """把 AU 概率按阈值转换为 0/1"""
    return (np.asarray(probabilities, dtype=np.float64) > threshold).astype(np.int64)


def challenge_scores(
    ccc_v: Optional[float] = None,
    ccc_a: Optional[float] = None,
    expr_f1: Optional[float] = None,
    expr_tacc: Optional[float] = None,
    au_af1: Optional[float] = None,
    au_tacc: Optional[float] = None,
) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    """
    三个任务的挑战赛得分

    S_VA = 0.5·CCC_V + 0.5·CCC_A；S_EXPR = 0.67·F1 + 0.33·TAcc；S_AU = 0.5·AF1 + 0.5·TAcc。
    分项缺失时对应得分为 None。
    """
    s_va = s_expr = s_au = None
    if ccc_v is not None and ccc_a is not None:
        s_va = VA_WEIGHTS[0] * ccc_v + VA_WEIGHTS[1] * ccc_a
    if expr_f1 is not None and expr_tacc is not None:
        s_expr = EXPR_WEIGHTS[0] * expr_f1 + EXPR_WEIGHTS[1] * expr_tacc
    if au_af1 is not None and au_tacc is not None:
        s_au = AU_WEIGHTS[0] * au_af1 + AU_WEIGHTS[1] * au_tacc
    return s_va, s_expr, s_au
