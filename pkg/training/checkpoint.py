"""
模型检查点
自描述的 torch 容器：格式版本、ModelConfig、参数字典和元数据
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch
from pydantic import ValidationError

from core.config import ModelConfig
from core.errors import CheckpointError, DataIOError
from core.logger import logger
from model.network import AffectFPN

CHECKPOINT_FORMAT_VERSION = 1

# 不影响网络结构的配置字段，加载时不参与一致性比较
_NON_ARCHITECTURE_FIELDS = {"seed", "pretrained_path", "active_tasks"}

PathLike = Union[str, Path]


def _config_json(config: ModelConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), sort_keys=True)


def checkpoint_digest(state_dict: Dict[str, torch.Tensor], config: ModelConfig) -> str:
    """参数与配置的 sha256 摘要，只依赖内容"""
    digest = hashlib.sha256()
    digest.update(_config_json(config).encode("utf-8"))
    for name in sorted(state_dict):
        tensor = state_dict[name].detach().cpu().contiguous()
        digest.update(name.encode("utf-8"))
        digest.update(str(tensor.dtype).encode("utf-8"))
        digest.update(str(tuple(tensor.shape)).encode("utf-8"))
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def model_digest(model: AffectFPN) -> str:
    return checkpoint_digest(model.state_dict(), model.config)


def save_checkpoint(model: AffectFPN, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> str:
    """
    保存检查点

    Args:
        model: 模型
        path: 输出路径
        metadata: 附加元数据（只允许基本类型）

    Returns:
        str: 检查点内容摘要
    """
    path = Path(path)
    state_dict = {name: tensor.detach().cpu().clone() for name, tensor in model.state_dict().items()}
    digest = checkpoint_digest(state_dict, model.config)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": _config_json(model.config),
        "state_dict": state_dict,
        "metadata": dict(metadata or {}),
        "digest": digest,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as e:
        raise DataIOError(f"检查点写入失败: {path}: {e}")
    logger.debug(f"检查点已保存 | path={path} digest={digest[:12]}")
    return digest


def load_checkpoint(
    path: PathLike,
    expected_config: Optional[ModelConfig] = None,
) -> Tuple[AffectFPN, Dict[str, Any]]:
    """
    加载检查点并重建模型

    Args:
        path: 检查点路径
        expected_config: 期望的模型配置，结构字段不一致时报错

    Returns:
        (model, metadata)
    """
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"检查点不存在: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"检查点无法解析: {path}: {e}") from e

    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"不是有效的检查点文件: {path}")
    version = payload["format_version"]
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"检查点格式版本 {version} 不受支持（当前为 {CHECKPOINT_FORMAT_VERSION}）")

    try:
        config = ModelConfig.model_validate(json.loads(payload["model_config"]))
    except (ValidationError, ValueError, KeyError) as e:
        raise CheckpointError(f"检查点中的模型配置无效: {e}") from e

    if expected_config is not None:
        mismatched = [
            name for name in ModelConfig.model_fields
            if name not in _NON_ARCHITECTURE_FIELDS and getattr(config, name) != getattr(expected_config, name)
        ]
        if mismatched:
            details = ", ".join(
                f"{name}: 检查点={getattr(config, name)} 期望={getattr(expected_config, name)}" for name in mismatched
            )
            raise CheckpointError(f"检查点配置与期望不一致: {details}")

    state_dict = payload["state_dict"]
    # 重建时不再加载预训练权重
    model = AffectFPN(config.model_copy(update={"pretrained_path": None}))
    dtypes = {t.dtype for t in state_dict.values() if t.is_floating_point()}
    if len(dtypes) == 1:
        model.to(dtypes.pop())
    try:
        model.load_state_dict(state_dict, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"检查点参数与模型结构不一致: {e}") from e

    if payload.get("digest") and checkpoint_digest(model.state_dict(), config) != payload["digest"]:
        raise CheckpointError(f"检查点摘要校验失败: {path}")
    model.eval()
    return model, dict(payload.get("metadata", {}))
