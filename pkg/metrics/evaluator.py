"""
评估器
读取预测文件与标签清单，按样本ID对齐后计算完整的评估报告
"""
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from core.errors import AlignmentError, DataIOError, ManifestParseError
from core.logger import kv, logger
from core.tasks import NUM_EXPRESSIONS, Task
from data.manifest import load_manifest
from data.models import DatasetManifest, Provenance
from metrics.calculator import (
    au_average_f1,
    binarize_au,
    ccc_with_flag,
    challenge_scores,
    confusion_matrix,
    macro_f1,
    total_accuracy,
)
from metrics.models import MetricsReport

PREDICTION_BASE_COLUMNS = ["id", "valence", "arousal", "expr_class"]

PathLike = Union[str, Path]


def prediction_columns(num_aus: int) -> List[str]:
    return PREDICTION_BASE_COLUMNS + [f"au_{j}" for j in range(num_aus)]


def save_predictions(frame: pd.DataFrame, path: PathLike) -> Path:
    """写出预测文件: id,valence,arousal,expr_class,au_0..au_{K-1}"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise DataIOError(f"预测文件写入失败: {path}: {e}")
    return path


def load_predictions(path: PathLike) -> pd.DataFrame:
    """读取并校验预测文件"""
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"预测文件不存在: {path}")
    try:
        frame = pd.read_csv(path, dtype={"id": str}, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ManifestParseError(f"预测文件格式错误: {e}")

    columns = list(frame.columns)
    num_aus = sum(1 for c in columns if c.startswith("au_"))
    if columns != prediction_columns(num_aus):
        raise ManifestParseError(f"预测文件表头不符: {','.join(columns)}", row=1)
    numeric = columns[1:]
    try:
        frame[numeric] = frame[numeric].apply(pd.to_numeric, errors="raise")
    except (ValueError, TypeError) as e:
        raise ManifestParseError(f"预测文件含有非数值字段: {e}")
    if frame[numeric].isna().any().any():
        raise ManifestParseError("预测文件含有空字段")
    return frame


def compute_report(
    va_pred: Optional[np.ndarray] = None,
    va_true: Optional[np.ndarray] = None,
    expr_pred: Optional[np.ndarray] = None,
    expr_true: Optional[np.ndarray] = None,
    au_pred: Optional[np.ndarray] = None,
    au_true: Optional[np.ndarray] = None,
    num_expressions: int = NUM_EXPRESSIONS,
    au_threshold: float = 0.5,
) -> MetricsReport:
    """
    由已对齐的数组计算评估报告

    Args:
        va_pred / va_true: (n, 2) 效价-唤醒度
        expr_pred / expr_true: (n,) 表情类别
        au_pred: (n, K) AU 概率；au_true: (n, K) AU 真实 0/1
        num_expressions: 表情类别数
        au_threshold: AU 判定阈值（概率大于阈值记为 1）

    Returns:
        MetricsReport: 没有样本的任务记为 absent
    """
    fields = {"counts": {}, "absent_tasks": [], "ccc_degenerate": []}

    va_n = 0 if va_true is None else len(va_true)
    fields["counts"][Task.VA.value] = va_n
    if va_n >= 2:
        va_pred = np.asarray(va_pred, dtype=np.float64)
        va_true = np.asarray(va_true, dtype=np.float64)
        ccc_v, degenerate_v = ccc_with_flag(va_pred[:, 0], va_true[:, 0])
        ccc_a, degenerate_a = ccc_with_flag(va_pred[:, 1], va_true[:, 1])
        fields.update(ccc_v=ccc_v, ccc_a=ccc_a, va_mse=float(np.mean((va_pred - va_true) ** 2)))
        if degenerate_v:
            fields["ccc_degenerate"].append("valence")
        if degenerate_a:
            fields["ccc_degenerate"].append("arousal")
    else:
        if va_n == 1:
            logger.warning("VA 只有 1 个真实标签，无法计算 CCC，记为缺失")
        fields["absent_tasks"].append(Task.VA.value)

    expr_n = 0 if expr_true is None else len(expr_true)
    fields["counts"][Task.EXPR.value] = expr_n
    if expr_n > 0:
        expr_pred = np.asarray(expr_pred, dtype=np.int64)
        expr_true = np.asarray(expr_true, dtype=np.int64)
        cm = confusion_matrix(expr_pred, expr_true, num_expressions)
        fields.update(expr_f1=macro_f1(cm), expr_tacc=total_accuracy(expr_pred, expr_true))
    else:
        fields["absent_tasks"].append(Task.EXPR.value)

    au_n = 0 if au_true is None else len(au_true)
    fields["counts"][Task.AU.value] = au_n
    if au_n > 0:
        pred_bits = binarize_au(au_pred, au_threshold)
        true_bits = binarize_au(au_true, 0.5)
        fields.update(au_af1=au_average_f1(pred_bits, true_bits), au_tacc=total_accuracy(pred_bits, true_bits))
    else:
        fields["absent_tasks"].append(Task.AU.value)

    s_va, s_expr, s_au = challenge_scores(
        fields.get("ccc_v"), fields.get("ccc_a"),
        fields.get("expr_f1"), fields.get("expr_tacc"),
        fields.get("au_af1"), fields.get("au_tacc"),
    )
    return MetricsReport(s_va=s_va, s_expr=s_expr, s_au=s_au, **fields)


def align_predictions(predictions: pd.DataFrame, labels: DatasetManifest) -> pd.DataFrame:
    """按标签清单顺序排列预测行，ID 集合必须完全一致"""
    ids = predictions["id"].astype(str)
    duplicated = ids[ids.duplicated()].tolist()
    if duplicated:
        raise AlignmentError(f"预测文件中样本ID重复: {duplicated[:5]}")
    predicted = set(ids)
    expected = set(labels.ids)
    if predicted != expected:
        missing = sorted(expected - predicted)
        extra = sorted(predicted - expected)
        raise AlignmentError(
            f"预测与标签的样本ID不一致: 缺少 {len(missing)} 个 {missing[:5]}，多出 {len(extra)} 个 {extra[:5]}"
        )
    return predictions.assign(id=ids).set_index("id").loc[labels.ids]


def evaluate_frames(
    predictions: pd.DataFrame,
    labels: DatasetManifest,
    au_threshold: float = 0.5,
) -> MetricsReport:
    """
    评估内存中的预测表

    只在真实标注（provenance=gt）的样本上计算各任务指标。
    """
    aligned = align_predictions(predictions, labels)
    au_cols = [f"au_{j}" for j in range(labels.num_aus)]
    if any(c not in aligned.columns for c in au_cols):
        raise AlignmentError(f"预测文件的 AU 列数与标签 K={labels.num_aus} 不一致")

    def gt_rows(task: Task) -> Tuple[List[int], list]:
        rows, values = [], []
        for position, record in enumerate(labels.records):
            if record.origin(task) == Provenance.GT:
                rows.append(position)
                values.append(record.targets.get(task))
        return rows, values

    va_rows, va_values = gt_rows(Task.VA)
    expr_rows, expr_values = gt_rows(Task.EXPR)
    au_rows, au_values = gt_rows(Task.AU)

    expr_true = [v if isinstance(v, int) else int(np.argmax(v)) for v in expr_values]
    report = compute_report(
        va_pred=aligned[["valence", "arousal"]].to_numpy(dtype=np.float64)[va_rows],
        va_true=np.asarray(va_values, dtype=np.float64).reshape(-1, 2),
        expr_pred=aligned["expr_class"].to_numpy(dtype=np.int64)[expr_rows],
        expr_true=np.asarray(expr_true, dtype=np.int64),
        au_pred=aligned[au_cols].to_numpy(dtype=np.float64)[au_rows],
        au_true=np.asarray(au_values, dtype=np.float64).reshape(-1, labels.num_aus),
        num_expressions=labels.num_expressions,
        au_threshold=au_threshold,
    )
    logger.info(
        "评估完成 | " + kv(
            s_va=report.s_va if report.s_va is not None else "absent",
            s_expr=report.s_expr if report.s_expr is not None else "absent",
            s_au=report.s_au if report.s_au is not None else "absent",
        )
    )
    return report


def evaluate(predictions_path: PathLike, labels_path: PathLike, au_threshold: float = 0.5) -> MetricsReport:
    """
    评估预测文件

    Args:
        predictions_path: 预测文件
        labels_path: 标签清单
        au_threshold: AU 判定阈值

    Returns:
        MetricsReport: 评估报告
    """
    labels = load_manifest(labels_path)
    predictions = load_predictions(predictions_path)
    return evaluate_frames(predictions, labels, au_threshold=au_threshold)


def write_report(report: MetricsReport, out_dir: PathLike, stem: str = "report") -> Tuple[Path, Path]:
    """写出人类可读报告 <stem>.txt 与机器可读 <stem>.kv"""
    out_dir = Path(out_dir)
    text_path = out_dir / f"{stem}.txt"
    kv_path = out_dir / f"{stem}.kv"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path.write_text(report.to_text(), encoding="utf-8")
        kv_path.write_text(report.to_key_value(), encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"报告写入失败: {out_dir}: {e}")
    return text_path, kv_path
