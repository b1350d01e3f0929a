"""
合成数据集生成
每个样本有一个潜在表情类别，图像由该类别固定的色块模板（加噪声）生成，
三个任务的标签都由类别推导：EXPR=c，VA 为类别锚点，AU 为类别模板
"""
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from PIL import Image

from core.config import SyntheticConfig
from core.errors import DataIOError, InputValidationError
from core.logger import logger
from core.tasks import (
    DEFAULT_AU_NAMES,
    EXPRESSION_AU_TEMPLATES,
    EXPRESSION_VA_ANCHORS,
    NUM_EXPRESSIONS,
    Expression,
    Task,
)
from data.manifest import save_manifest
from data.models import DatasetManifest, SampleRecord, Source
from losses.models import TargetSet

# 模板与种子无关，不同划分共用同一组类别模板
TEMPLATE_SEED = 20220318
GRID_CELLS = 4
VA_JITTER = 0.1
AU_FLIP_SCALE = 0.1


def class_templates(num_classes: int = NUM_EXPRESSIONS) -> np.ndarray:
    """各类别的色块模板，形状 (C, GRID, GRID, 3)，取值 [0.1, 0.9]"""
    rng = np.random.default_rng(TEMPLATE_SEED)
    return rng.uniform(0.1, 0.9, size=(num_classes, GRID_CELLS, GRID_CELLS, 3))


def au_templates(num_aus: int) -> np.ndarray:
    """各类别的 AU 激活模板，形状 (C, K)"""
    table = np.zeros((NUM_EXPRESSIONS, num_aus), dtype=np.int64)
    named = DEFAULT_AU_NAMES[:num_aus]
    for expression in Expression:
        for name in EXPRESSION_AU_TEMPLATES[expression]:
            if name in named:
                table[expression.value, named.index(name)] = 1
    if num_aus > len(DEFAULT_AU_NAMES):
        # 超出默认 12 个的 AU 使用固定随机模板
        rng = np.random.default_rng(TEMPLATE_SEED + 1)
        extra = num_aus - len(DEFAULT_AU_NAMES)
        table[:, len(DEFAULT_AU_NAMES):] = rng.integers(0, 2, size=(NUM_EXPRESSIONS, extra))
    return table


def render_image(template: np.ndarray, image_size: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    """把色块模板放大到 image_size 并叠加高斯噪声，返回 uint8 RGB"""
    cell = image_size // GRID_CELLS
    pixels = np.repeat(np.repeat(template, cell, axis=0), cell, axis=1)
    if pixels.shape[0] != image_size:
        pad = image_size - pixels.shape[0]
        pixels = np.pad(pixels, ((0, pad), (0, pad), (0, 0)), mode="edge")
    if noise > 0:
        pixels = pixels + noise * rng.standard_normal(pixels.shape)
    return (np.clip(pixels, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def generate_synthetic(
    config: SyntheticConfig,
    out_dir: Union[str, Path],
    split: str = "train",
    num_samples: Optional[int] = None,
    mask_rate: Optional[float] = None,
    stream: int = 0,
) -> DatasetManifest:
    """
    生成一个合成数据划分（图像 + 清单）

    Args:
        config: 合成数据配置
        out_dir: 输出目录，图像写入 out_dir/images，清单写入 out_dir/<split>.csv
        split: 划分名称，同时作为样本ID前缀
        num_samples: 样本数，默认取 config.num_samples
        mask_rate: 每个任务的标签屏蔽概率，默认取 config.mask_rate
        stream: 随机流编号，区分同一种子下的不同划分

    Returns:
        DatasetManifest: 生成的清单
    """
    n = config.num_samples if num_samples is None else num_samples
    rate = config.mask_rate if mask_rate is None else mask_rate
    if n < 1:
        raise InputValidationError(f"样本数必须至少为 1，实际为 {n}")

    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"输出目录不可写: {out_dir}: {e}")

    rng = np.random.default_rng([config.seed % (2 ** 32), stream])
    templates = class_templates()
    au_table = au_templates(config.num_aus)

    classes = rng.permutation(np.arange(n) % NUM_EXPRESSIONS)
    masked = rng.random((n, 3)) < rate
    for i in np.flatnonzero(masked.all(axis=1)):
        # 每个样本至少保留一个任务的标签
        masked[i, rng.integers(3)] = False

    records = []
    for i in range(n):
        label = int(classes[i])
        pixels = render_image(templates[label], config.image_size, config.noise, rng)
        image_name = f"{split}_{i:05d}.png"
        try:
            Image.fromarray(pixels).save(image_dir / image_name)
        except OSError as e:
            raise DataIOError(f"图像写入失败: {image_dir / image_name}: {e}")

        valence, arousal = EXPRESSION_VA_ANCHORS[Expression(label)]
        au = au_table[label].astype(np.float64)
        if config.noise > 0:
            valence, arousal = np.clip(
                np.array([valence, arousal]) + VA_JITTER * config.noise * rng.standard_normal(2), -1.0, 1.0
            )
            flips = rng.random(config.num_aus) < min(0.5, AU_FLIP_SCALE * config.noise)
            au = np.where(flips, 1.0 - au, au)

        targets = TargetSet(
            va=None if masked[i, 0] else (float(valence), float(arousal)),
            expr=None if masked[i, 1] else label,
            au=None if masked[i, 2] else [float(a) for a in au],
        )
        records.append(SampleRecord(
            id=f"{split}_{i:05d}",
            image_path=f"images/{image_name}",
            source=Source.SYNTHETIC,
            targets=targets,
        ))

    manifest = DatasetManifest(records=records, num_aus=config.num_aus, root=str(out_dir.resolve()))
    save_manifest(manifest, out_dir / f"{split}.csv")
    coverage = manifest.coverage
    logger.info(
        f"合成数据生成完成 | split={split} n={n} mask_rate={rate} noise={config.noise} "
        f"va={coverage[Task.VA]} expr={coverage[Task.EXPR]} au={coverage[Task.AU]}"
    )
    return manifest


def generate_synthetic_splits(
    config: SyntheticConfig, out_dir: Union[str, Path]
) -> Tuple[DatasetManifest, Optional[DatasetManifest]]:
    """生成训练划分（按配置屏蔽标签）和全标注的验证划分"""
    train = generate_synthetic(config, out_dir, split="train", stream=0)
    val = None
    if config.val_samples > 0:
        val = generate_synthetic(
            config, out_dir, split="val", num_samples=config.val_samples, mask_rate=0.0, stream=1
        )
    return train, val


__all__ = ["generate_synthetic", "generate_synthetic_splits", "class_templates", "au_templates"]
