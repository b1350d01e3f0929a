"""
数据集清单读写
清单是 UTF-8 分隔文本：id,image_path,source,valence,arousal,expr,au_0..au_{K-1},prov_va,prov_expr,prov_au
空字符串表示缺失；软表情标签写作以分号分隔的概率
"""
import hashlib
import io
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from pydantic import ValidationError  # noqa: E402

from core.errors import DataIOError, InputValidationError, ManifestParseError, MergeError  # noqa: E402
from core.logger import logger  # noqa: E402
from core.tasks import ALL_TASKS, NUM_EXPRESSIONS, Task  # noqa: E402
from data.models import (  # noqa: E402
    DatasetManifest,
    ExpressionDistribution,
    Provenance,
    SampleRecord,
    Source,
)
from losses.models import TargetSet  # noqa: E402

LEADING_COLUMNS = ["id", "image_path", "source", "valence", "arousal", "expr"]
PROVENANCE_COLUMNS = ["prov_va", "prov_expr", "prov_au"]
SOFT_SEPARATOR = ";"

PathLike = Union[str, Path]


def au_columns(num_aus: int) -> List[str]:
    return [f"au_{j}" for j in range(num_aus)]


def manifest_columns(num_aus: int) -> List[str]:
    return LEADING_COLUMNS + au_columns(num_aus) + PROVENANCE_COLUMNS


def format_float(value: float) -> str:
    """规范化的浮点文本：整数值写成整数，其余使用 repr"""
    value = float(value)
    if value == int(value):
        return str(int(value))
    return repr(value)


def _parse_float(text: str, column: str, row: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ManifestParseError(f"{column} 列无法解析为数值: {text!r}", row=row)


def _parse_expr(text: str, row: int):
    if text == "":
        return None
    if SOFT_SEPARATOR in text:
        return [_parse_float(p, "expr", row) for p in text.split(SOFT_SEPARATOR)]
    try:
        return int(text)
    except ValueError:
        raise ManifestParseError(f"expr 列必须是类别整数或以分号分隔的概率: {text!r}", row=row)


def _parse_row(values: Dict[str, str], num_aus: int, num_expressions: int, row: int) -> SampleRecord:
    if not values["id"]:
        raise ManifestParseError("id 为空", row=row)
    try:
        source = Source(values["source"] or Source.SYNTHETIC.value)
    except ValueError:
        raise ManifestParseError(f"未知的数据来源: {values['source']!r}", row=row)

    valence, arousal = values["valence"], values["arousal"]
    if (valence == "") != (arousal == ""):
        raise ManifestParseError("valence 与 arousal 必须同时给出或同时为空", row=row)
    va = None
    if valence != "":
        va = (_parse_float(valence, "valence", row), _parse_float(arousal, "arousal", row))

    expr = _parse_expr(values["expr"], row)
    if isinstance(expr, int) and not 0 <= expr < num_expressions:
        raise InputValidationError(f"第 {row} 行: 表情类别 {expr} 超出范围 [0, {num_expressions})")
    if isinstance(expr, list) and len(expr) != num_expressions:
        raise ManifestParseError(f"表情分布长度 {len(expr)} 与类别数 {num_expressions} 不一致", row=row)

    au_texts = [values[c] for c in au_columns(num_aus)]
    filled = [t != "" for t in au_texts]
    if any(filled) and not all(filled):
        raise ManifestParseError("AU 列只能全部给出或全部为空", row=row)
    au = [_parse_float(t, f"au_{j}", row) for j, t in enumerate(au_texts)] if all(filled) else None

    provenance = {}
    for task, column in zip(ALL_TASKS, PROVENANCE_COLUMNS):
        text = values[column]
        if text == "":
            continue
        try:
            provenance[task] = Provenance(text)
        except ValueError:
            raise ManifestParseError(f"{column} 列的来源无效: {text!r}", row=row)

    try:
        targets = TargetSet(va=va, expr=expr, au=au)
    except ValidationError as e:
        raise InputValidationError(f"第 {row} 行: {e.errors()[0]['msg']}") from e
    try:
        return SampleRecord(
            id=values["id"], image_path=values["image_path"], source=source,
            targets=targets, provenance=provenance,
        )
    except ValidationError as e:
        raise ManifestParseError(e.errors()[0]["msg"], row=row) from e


def load_manifest(path: PathLike, num_expressions: int = NUM_EXPRESSIONS) -> DatasetManifest:
    """
    读取数据集清单

    Args:
        path: 清单文件路径
        num_expressions: 表情类别数

    Returns:
        DatasetManifest: 解析后的清单，相对图像路径以清单所在目录为基准
    """
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"清单文件不存在: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise ManifestParseError("清单文件为空", row=1)
    except pd.errors.ParserError as e:
        raise ManifestParseError(f"清单格式错误: {e}")
    except OSError as e:
        raise DataIOError(f"清单文件读取失败: {path}: {e}")

    columns = list(frame.columns)
    num_aus = sum(1 for c in columns if c.startswith("au_"))
    if num_aus < 1 or columns != manifest_columns(num_aus):
        raise ManifestParseError(f"表头与清单格式不符: {','.join(columns)}", row=1)

    records = []
    for offset, values in enumerate(frame.to_dict(orient="records")):
        row = offset + 2
        if any(not isinstance(v, str) for v in values.values()):
            raise ManifestParseError("字段数量不足", row=row)
        records.append(_parse_row(values, num_aus, num_expressions, row))

    try:
        manifest = DatasetManifest(
            records=records, num_expressions=num_expressions, num_aus=num_aus,
            root=str(path.parent.resolve()),
        )
    except ValidationError as e:
        raise ManifestParseError(e.errors()[0]["msg"]) from e

    coverage = manifest.coverage
    logger.info(
        f"清单加载完成 | path={path} n={len(manifest)} "
        f"va={coverage[Task.VA]} expr={coverage[Task.EXPR]} au={coverage[Task.AU]}"
    )
    return manifest


def _relative_image_path(manifest: DatasetManifest, record: SampleRecord, base_dir: Optional[Path]) -> str:
    if base_dir is None:
        return record.image_path
    resolved = manifest.resolve_path(record)
    if not resolved.is_absolute():
        resolved = Path(os.path.abspath(resolved))
    return Path(os.path.relpath(resolved, base_dir)).as_posix()


def manifest_rows(manifest: DatasetManifest, base_dir: Optional[Path] = None) -> List[Dict[str, str]]:
    """把清单记录转换为文本行（按清单格式）"""
    rows = []
    for record in manifest.records:
        targets = record.targets
        row = {
            "id": record.id,
            "image_path": _relative_image_path(manifest, record, base_dir),
            "source": record.source.value,
            "valence": "",
            "arousal": "",
            "expr": "",
        }
        if targets.va is not None:
            row["valence"], row["arousal"] = (format_float(v) for v in targets.va)
        if isinstance(targets.expr, int):
            row["expr"] = str(targets.expr)
        elif targets.expr is not None:
            row["expr"] = SOFT_SEPARATOR.join(repr(float(p)) for p in targets.expr)
        for j, column in enumerate(au_columns(manifest.num_aus)):
            row[column] = "" if targets.au is None else format_float(targets.au[j])
        for task, column in zip(ALL_TASKS, PROVENANCE_COLUMNS):
            row[column] = record.origin(task).value
        rows.append(row)
    return rows


def to_csv_text(manifest: DatasetManifest, base_dir: Optional[PathLike] = None) -> str:
    """
    规范化的清单文本

    Args:
        manifest: 清单
        base_dir: 图像路径改写为相对该目录；None 时原样输出
    """
    base = Path(os.path.abspath(base_dir)) if base_dir is not None else None
    frame = pd.DataFrame(manifest_rows(manifest, base), columns=manifest_columns(manifest.num_aus), dtype=str)
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, lineterminator="\n")
    return buffer.getvalue()


def save_manifest(manifest: DatasetManifest, path: PathLike) -> Path:
    """写出清单，图像路径改写为相对清单所在目录"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(to_csv_text(manifest, base_dir=path.parent), encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"清单写入失败: {path}: {e}")
    logger.debug(f"清单已保存 | path={path} n={len(manifest)}")
    return path


def manifest_digest(manifest: DatasetManifest) -> str:
    """清单内容的 sha256 摘要"""
    text = to_csv_text(manifest, base_dir=manifest.root)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _prefixed_id(record: SampleRecord) -> str:
    prefix = f"{record.source.value}:"
    return record.id if record.id.startswith(prefix) else prefix + record.id


def merge_datasets(manifests: Sequence[DatasetManifest]) -> DatasetManifest:
    """
    按顺序拼接多个清单，不做重采样和去重

    样本ID加上来源前缀（已有前缀则保持），图像路径改写为绝对路径。

    Args:
        manifests: 待合并的清单列表

    Returns:
        DatasetManifest: 合并后的清单
    """
    non_empty = [m for m in manifests if len(m) > 0]
    reference = non_empty[0] if non_empty else (manifests[0] if manifests else DatasetManifest())
    for manifest in non_empty:
        if manifest.num_aus != reference.num_aus:
            raise MergeError(f"AU 数量不一致: {manifest.num_aus} vs {reference.num_aus}")
        if manifest.num_expressions != reference.num_expressions:
            raise MergeError(f"表情类别数不一致: {manifest.num_expressions} vs {reference.num_expressions}")

    records = []
    seen = set()
    for manifest in non_empty:
        for record in manifest.records:
            new_id = _prefixed_id(record)
            if new_id in seen:
                raise MergeError(f"合并后样本ID冲突: {new_id}")
            seen.add(new_id)
            image_path = Path(os.path.abspath(manifest.resolve_path(record))).as_posix()
            records.append(SampleRecord(
                id=new_id, image_path=image_path, source=record.source,
                targets=record.targets, provenance=dict(record.provenance),
            ))

    merged = DatasetManifest(
        records=records, num_expressions=reference.num_expressions, num_aus=reference.num_aus, root=None
    )
    coverage = merged.coverage
    logger.info(
        f"数据集合并完成 | sources={len(manifests)} n={len(merged)} "
        f"va={coverage[Task.VA]} expr={coverage[Task.EXPR]} au={coverage[Task.AU]}"
    )
    return merged


def expression_distribution(manifest: DatasetManifest) -> ExpressionDistribution:
    """统计有表情标签的样本的类别分布"""
    return ExpressionDistribution(counts=manifest.class_histogram)


def plot_expression_distributions(
    distributions: Dict[str, ExpressionDistribution],
    path: PathLike,
    normalize: bool = True,
) -> Path:
    """
    绘制一个或多个数据集的表情分布分组柱状图

    Args:
        distributions: 数据集名称 -> 分布
        path: 输出图片路径
        normalize: 是否按比例绘制

    Returns:
        Path: 图片路径
    """
    path = Path(path)
    names = next(iter(distributions.values())).names if distributions else []
    x = np.arange(len(names))
    width = 0.8 / max(len(distributions), 1)

    fig, ax = plt.subplots(figsize=(8, 4.5))
    for offset, (label, dist) in enumerate(distributions.items()):
        values = dist.proportions if normalize else dist.counts
        ax.bar(x + offset * width - 0.4 + width / 2, values, width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylabel("proportion" if normalize else "count")
    ax.set_title("Basic expression distribution")
    if distributions:
        ax.legend()
    fig.tight_layout()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=100, metadata={"Software": None})
    except OSError as e:
        raise DataIOError(f"分布图写入失败: {path}: {e}")
    finally:
        plt.close(fig)
    return path


def emit_expression_distribution(
    manifests: Dict[str, DatasetManifest],
    table_path: PathLike,
    plot_path: Optional[PathLike] = None,
    include_merged: bool = True,
) -> Dict[str, ExpressionDistribution]:
    """
    输出表情分布表格（以及可选的分组柱状图）

    多个数据集时追加合并后的分布，便于比较各来源与合并结果。
    """
    distributions = {name: expression_distribution(m) for name, m in manifests.items()}
    if include_merged and len(manifests) > 1:
        distributions["merged"] = expression_distribution(merge_datasets(list(manifests.values())))

    lines = []
    for name, dist in distributions.items():
        table = dist.to_table().splitlines()
        if not lines:
            lines.append("dataset," + table[0])
        lines.extend(f"{name},{row}" for row in table[1:])
    table_path = Path(table_path)
    try:
        table_path.parent.mkdir(parents=True, exist_ok=True)
        table_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"分布表格写入失败: {table_path}: {e}")

    if plot_path is not None:
        plot_expression_distributions(distributions, plot_path)
    for name, dist in distributions.items():
        logger.info(f"表情分布 | dataset={name} total={dist.total} counts={dist.counts}")
    return distributions
