"""
PyTorch 数据集封装
按清单顺序读取图像，并把目标编码为定长张量
"""
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch.utils.data import DataLoader, Dataset, Subset

from core.config import settings
from core.errors import InputShapeError
from core.logger import logger
from data.models import DatasetManifest
from losses.models import TargetBatch

# 图像归一化参数（ImageNet 统计量，与 torchvision 预训练权重一致）
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


def load_image(path) -> torch.Tensor:
    """读取 8 位 RGB 图像并归一化为 (3, H, W) 浮点张量"""
    with Image.open(path) as image:
        array = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    tensor = torch.from_numpy(array).permute(2, 0, 1)
    mean = torch.tensor(IMAGE_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGE_STD).view(3, 1, 1)
    return (tensor - mean) / std


class AffectDataset(Dataset):
    """
    清单对应的数据集

    __getitem__ 返回字典，读取失败的图像以全零占位并把 ok 置为 False，
    由调用方决定丢弃还是报告。
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        image_size: Optional[Tuple[int, int]] = None,
        cache_images: bool = True,
    ):
        """
        Args:
            manifest: 数据集清单
            image_size: 期望的 (高, 宽)，给出时校验每张图像并用于失败样本的占位
            cache_images: 是否缓存解码后的图像
        """
        self.manifest = manifest
        self.image_size = tuple(image_size) if image_size is not None else None
        self.targets = TargetBatch.from_targets(
            [r.targets for r in manifest.records], manifest.num_expressions, manifest.num_aus
        )
        self.cache_images = cache_images
        self._cache: Dict[int, torch.Tensor] = {}
        self._image_shape: Optional[Sequence[int]] = None

    def __len__(self) -> int:
        return len(self.manifest)

    def _image(self, index: int):
        if index in self._cache:
            return self._cache[index], True
        record = self.manifest.records[index]
        path = self.manifest.resolve_path(record)
        try:
            image = load_image(path)
        except (OSError, UnidentifiedImageError) as e:
            logger.warning(f"图像读取失败，样本将被跳过 | id={record.id} path={path} error={e}")
            return None, False
        if self.image_size is not None and tuple(image.shape[-2:]) != self.image_size:
            raise InputShapeError(
                f"样本 {record.id} 的图像尺寸 {image.shape[-2]}x{image.shape[-1]} "
                f"与模型输入 {self.image_size[0]}x{self.image_size[1]} 不一致"
            )
        self._image_shape = tuple(image.shape)
        if self.cache_images:
            self._cache[index] = image
        return image, True

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        image, ok = self._image(index)
        if image is None:
            if self.image_size is not None:
                shape = (3, *self.image_size)
            else:
                shape = self._image_shape or (3, 1, 1)
            image = torch.zeros(shape)
        item = {name: getattr(self.targets, name)[index] for name in TargetBatch.model_fields}
        item["image"] = image
        item["index"] = torch.tensor(index)
        item["ok"] = torch.tensor(ok)
        return item

    def record_ids(self, indices: Sequence[int]) -> List[str]:
        return [self.manifest.records[int(i)].id for i in indices]


def make_loader(
    dataset: AffectDataset,
    indices: Optional[Sequence[int]] = None,
    batch_size: int = 128,
    num_workers: Optional[int] = None,
) -> DataLoader:
    """
    按给定索引顺序分批的 DataLoader（不再打乱，顺序由抽样器决定）

    Args:
        dataset: 数据集
        indices: 遍历顺序，None 表示清单顺序
        batch_size: 批大小
        num_workers: 解码进程数，None 时使用环境配置
    """
    subset = dataset if indices is None else Subset(dataset, list(indices))
    workers = settings.num_workers if num_workers is None else num_workers
    return DataLoader(subset, batch_size=batch_size, shuffle=False, num_workers=workers)


def split_batch(batch: Dict[str, torch.Tensor]):
    """
    拆出可用样本：返回 (images, targets, indices, failed_indices)

    读取失败的样本会被移除，整批失败时 images 为 None。
    """
    ok = batch["ok"]
    indices = batch["index"]
    failed = indices[~ok].tolist()
    if not bool(ok.any()):
        return None, None, indices[ok], failed
    targets = TargetBatch.from_collated(batch)
    if not bool(ok.all()):
        keep = torch.nonzero(ok).flatten()
        return batch["image"][keep], targets.select(keep), indices[keep], failed
    return batch["image"], targets, indices, failed
