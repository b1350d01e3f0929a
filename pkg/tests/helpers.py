"""
测试用的清单构造工具
"""
from typing import List, Optional

import pandas as pd

from data.models import DatasetManifest, SampleRecord, Source
from losses.models import TargetSet
from metrics.evaluator import prediction_columns


def make_record(
    sample_id: str,
    va=None,
    expr=None,
    au=None,
    source: Source = Source.SYNTHETIC,
    image_path: Optional[str] = None,
) -> SampleRecord:
    return SampleRecord(
        id=sample_id,
        image_path=image_path or f"images/{sample_id}.png",
        source=source,
        targets=TargetSet(va=va, expr=expr, au=au),
    )


def keep_tasks(record: SampleRecord, va: bool, expr: bool, au: bool) -> SampleRecord:
    """只保留指定任务的标签"""
    targets = record.targets
    return SampleRecord(
        id=record.id,
        image_path=record.image_path,
        source=record.source,
        targets=TargetSet(
            va=targets.va if va else None,
            expr=targets.expr if expr else None,
            au=targets.au if au else None,
        ),
    )


def coverage_pattern(index: int):
    """前 40 个有 VA，后 70 个（30..99）有表情，前 55 个有 AU；每个样本至少有一个任务"""
    return index < 40, index >= 30, index < 55


def apply_coverage_pattern(manifest: DatasetManifest) -> DatasetManifest:
    records = [keep_tasks(r, *coverage_pattern(i)) for i, r in enumerate(manifest.records)]
    return manifest.subset(records)


def labeled_records(n: int, num_aus: int = 12, prefix: str = "s") -> List[SampleRecord]:
    """全标注的记录（不需要真实图像）"""
    records = []
    for i in range(n):
        records.append(make_record(
            f"{prefix}{i:03d}",
            va=(round(-0.9 + 1.8 * i / max(n - 1, 1), 6), round(0.5 - 0.01 * i, 6)),
            expr=i % 7,
            au=[float((i + j) % 2) for j in range(num_aus)],
        ))
    return records


def distribution_manifest(counts: List[int]) -> DatasetManifest:
    """按给定的各类别数量构造只有表情标签的清单"""
    records = []
    for label, count in enumerate(counts):
        for i in range(count):
            records.append(make_record(f"c{label}_{i}", expr=label))
    return DatasetManifest(records=records)


def predictions_from_labels(manifest: DatasetManifest) -> pd.DataFrame:
    """把标签原样作为预测（缺失任务填 0）"""
    rows = []
    for record in manifest.records:
        targets = record.targets
        va = targets.va or (0.0, 0.0)
        expr = targets.expr if targets.expr is not None else 0
        if isinstance(expr, list):
            expr = max(range(len(expr)), key=lambda c: expr[c])
        au = targets.au or [0.0] * manifest.num_aus
        rows.append([record.id, va[0], va[1], expr, *au])
    return pd.DataFrame(rows, columns=prediction_columns(manifest.num_aus))


__all__ = [
    "make_record", "keep_tasks", "coverage_pattern", "apply_coverage_pattern",
    "labeled_records", "distribution_manifest", "predictions_from_labels",
]
