"""
骨干网络
提取 conv2~conv5 四个阶段的特征图（步长 4/8/16/32）
"""
from pathlib import Path
from typing import List, Tuple

import torch
import torch.nn as nn
from torchvision.models import resnet18, resnet50

from core.config import BackboneVariant, ModelConfig
from core.errors import CheckpointError
from core.logger import logger


def _conv_block(in_channels: int, out_channels: int) -> nn.Sequential:
    conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=2, padding=1)
    nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
    nn.init.zeros_(conv.bias)
    return nn.Sequential(conv, nn.SiLU())


class TinyBackbone(nn.Module):
    """
    桌面规模验证用的小型骨干

    每个阶段是一个步长为 2 的 3x3 卷积，激活函数 SiLU 处处光滑，
    便于有限差分梯度校验；步长安排与 ResNet 一致。
    """

    def __init__(self, stem_channels: int = 8, channels: Tuple[int, int, int, int] = (8, 16, 24, 32)):
        super().__init__()
        self.stem = _conv_block(3, stem_channels)               # stride 2
        self.stage2 = _conv_block(stem_channels, channels[0])   # stride 4
        self.stage3 = _conv_block(channels[0], channels[1])     # stride 8
        self.stage4 = _conv_block(channels[1], channels[2])     # stride 16
        self.stage5 = _conv_block(channels[2], channels[3])     # stride 32
        self.out_channels = tuple(channels)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        c2 = self.stage2(self.stem(x))
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        return [c2, c3, c4, c5]


class ResNetBackbone(nn.Module):
    """torchvision ResNet 骨干，只保留 stem 与 layer1~layer4"""

    def __init__(self, depth: int = 18, pretrained_path: str = None):
        super().__init__()
        if depth == 18:
            resnet = resnet18(weights=None)
            self.out_channels = (64, 128, 256, 512)
        elif depth == 50:
            resnet = resnet50(weights=None)
            self.out_channels = (256, 512, 1024, 2048)
        else:
            raise ValueError(f"不支持的 ResNet 深度: {depth}")

        if pretrained_path:
            load_pretrained(resnet, pretrained_path)

        # avgpool / fc 不参与特征提取，不注册到本模块
        self.enc0 = nn.Sequential(resnet.conv1, resnet.bn1, resnet.relu, resnet.maxpool)
        self.enc1 = resnet.layer1
        self.enc2 = resnet.layer2
        self.enc3 = resnet.layer3
        self.enc4 = resnet.layer4

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        enc0 = self.enc0(x)
        enc1 = self.enc1(enc0)  # stride 4
        enc2 = self.enc2(enc1)  # stride 8
        enc3 = self.enc3(enc2)  # stride 16
        enc4 = self.enc4(enc3)  # stride 32
        return [enc1, enc2, enc3, enc4]


def load_pretrained(resnet: nn.Module, path: str):
    """把 torchvision 格式的预训练权重加载进完整的 ResNet（非严格匹配）"""
    weight_file = Path(path)
    if not weight_file.is_file():
        raise CheckpointError(f"预训练权重文件不存在: {weight_file}")
    state = torch.load(weight_file, map_location="cpu", weights_only=True)
    result = resnet.load_state_dict(state, strict=False)
    logger.info(
        f"加载预训练骨干权重: {weight_file} | "
        f"missing={len(result.missing_keys)} unexpected={len(result.unexpected_keys)}"
    )


class BackboneFactory:
    """骨干网络工厂类"""

    @staticmethod
    def create_backbone(config: ModelConfig) -> nn.Module:
        """
        根据模型配置创建骨干网络

        Args:
            config: 模型配置

        Returns:
            nn.Module: 输出四个阶段特征图的骨干
        """
        variant = config.backbone_variant

        if variant == BackboneVariant.TINY:
            logger.debug("创建 tiny 骨干")
            return TinyBackbone()

        elif variant == BackboneVariant.RESNET18:
            logger.debug("创建 resnet18-like 骨干")
            return ResNetBackbone(depth=18, pretrained_path=config.pretrained_path)

        elif variant == BackboneVariant.RESNET50:
            logger.debug("创建 resnet50-like 骨干")
            return ResNetBackbone(depth=50, pretrained_path=config.pretrained_path)

        else:
            raise ValueError(f"不支持的骨干网络: {variant}")
