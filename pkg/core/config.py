"""
配置管理模块
负责加载环境变量、模型/训练配置以及命令行运行配置
"""
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import torch
from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings

from core.errors import ConfigError
from core.tasks import ALL_TASKS, NUM_EXPRESSIONS, Task
from losses.models import LossWeights

# 加载环境变量
load_dotenv()


class Settings(BaseSettings):
    """进程级配置（来自环境变量 / .env）"""

    # 日志配置
    log_level: str = os.getenv("LOG_LEVEL", "INFO")
    log_dir: str = os.getenv("LOG_DIR", "logs")
    log_to_file: bool = os.getenv("LOG_TO_FILE", "true").lower() in ["true", "1", "yes"]

    # 计算资源配置
    num_workers: int = int(os.getenv("NUM_WORKERS", "0"))
    torch_threads: int = int(os.getenv("TORCH_THREADS", "0"))
    device: str = os.getenv("DEVICE", "cpu")

    class Config:
        env_file = ".env"
        extra = "ignore"


# 全局配置实例
settings = Settings()


# 深层特征图相对输入的最大整除要求，stride 32 层使用向上取整
INPUT_SIZE_MULTIPLE = 16


class BackboneVariant(Enum):
    """骨干网络类型"""
    TINY = "tiny"
    RESNET18 = "resnet18-like"
    RESNET50 = "resnet50-like"


class VABounding(Enum):
    """效价-唤醒度输出的约束方式"""
    TANH = "tanh"
    LINEAR = "linear"


class Precision(Enum):
    """训练数值精度"""
    SINGLE = "single"
    DOUBLE = "double"


class OptimizerName(Enum):
    """自适应矩估计优化器"""
    ADAM = "adam"
    ADAMW = "adamw"


class LRSchedule(Enum):
    """学习率调度策略"""
    CONSTANT = "constant"
    COSINE = "cosine"


def _split_list(value: Any) -> Any:
    """把逗号分隔的字符串拆成列表，其余类型原样返回"""
    if isinstance(value, str):
        return [p.strip() for p in value.split(",") if p.strip()]
    return value


class ModelConfig(BaseModel):
    """多任务特征金字塔网络配置"""
    model_config = ConfigDict(extra="forbid")

    backbone_variant: BackboneVariant = BackboneVariant.RESNET18
    pyramid_channels: int = Field(default=256, ge=1)
    num_expressions: int = Field(default=NUM_EXPRESSIONS, ge=2)
    num_aus: int = Field(default=12, ge=1)
    input_size: Tuple[int, int] = (112, 112)
    va_bounding: VABounding = VABounding.TANH
    seed: int = 0

    # 扩展项
    active_tasks: List[Task] = Field(default_factory=lambda: list(ALL_TASKS))
    fpn_smoothing: bool = False
    pretrained_path: Optional[str] = None

    @field_validator("input_size", mode="before")
    @classmethod
    def _parse_input_size(cls, v):
        if isinstance(v, str):
            v = v.lower().replace("x", ",")
        return _split_list(v)

    @field_validator("active_tasks", mode="before")
    @classmethod
    def _parse_active_tasks(cls, v):
        return _split_list(v)

    @field_validator("input_size")
    @classmethod
    def _check_input_size(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        for side in v:
            if side <= 0 or side % INPUT_SIZE_MULTIPLE != 0:
                raise ValueError(
                    f"输入尺寸 {v[0]}x{v[1]} 无效: 高和宽必须是 {INPUT_SIZE_MULTIPLE} 的正整数倍"
                )
        return v

    @field_validator("active_tasks")
    @classmethod
    def _check_active_tasks(cls, v: List[Task]) -> List[Task]:
        if not v:
            raise ValueError("至少需要一个激活的任务头")
        # 固定 VA→EXPR→AU 顺序，去重
        return [t for t in ALL_TASKS if t in v]

    @property
    def concat_length(self) -> int:
        return 4 * self.pyramid_channels


class TrainConfig(BaseModel):
    """训练配置（默认值对应单任务教师：40 个受限轮次，每轮 25% 样本）"""
    model_config = ConfigDict(extra="forbid")

    optimizer: OptimizerName = OptimizerName.ADAM
    # 0 仅用于诊断（参数保持不变）
    learning_rate: float = Field(default=1e-3, ge=0.0)
    batch_size: int = Field(default=128, gt=0)
    epochs: int = Field(default=40, ge=1)
    epoch_fraction: float = Field(default=0.25, gt=0.0, le=1.0)
    seed: int = 0
    precision: Precision = Precision.SINGLE

    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    grad_clip_norm: Optional[float] = Field(default=None, gt=0.0)
    lr_schedule: LRSchedule = LRSchedule.CONSTANT
    num_workers: Optional[int] = Field(default=None, ge=0)
    show_progress: bool = False

    @field_validator("betas", mode="before")
    @classmethod
    def _parse_betas(cls, v):
        return _split_list(v)

    @classmethod
    def student_defaults(cls, **overrides) -> "TrainConfig":
        """多任务学生的默认配置：20 个完整轮次"""
        values = {"epochs": 20, "epoch_fraction": 1.0}
        values.update(overrides)
        return cls(**values)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == Precision.DOUBLE else torch.float32


class SyntheticConfig(BaseModel):
    """合成数据集配置"""
    model_config = ConfigDict(extra="forbid")

    num_samples: int = Field(default=1050, ge=1)
    val_samples: int = Field(default=210, ge=0)
    image_size: int = Field(default=32, ge=16)
    noise: float = Field(default=0.0, ge=0.0)
    mask_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    num_aus: int = Field(default=12, ge=1)
    seed: int = 0

    @field_validator("image_size")
    @classmethod
    def _check_image_size(cls, v: int) -> int:
        if v % INPUT_SIZE_MULTIPLE != 0:
            raise ValueError(f"合成图像边长必须是 {INPUT_SIZE_MULTIPLE} 的整数倍，实际为 {v}")
        return v


class DataPaths(BaseModel):
    """数据与产物路径"""
    model_config = ConfigDict(extra="forbid")

    manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    labels: Optional[str] = None
    predictions: Optional[str] = None
    completed: Optional[str] = None
    teachers_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    merge_inputs: List[str] = Field(default_factory=list)

    @field_validator("merge_inputs", mode="before")
    @classmethod
    def _parse_inputs(cls, v):
        if isinstance(v, str):
            return [p.strip() for p in v.split(",") if p.strip()]
        return v


class RunConfig(BaseModel):
    """命令行运行配置"""
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    output_dir: str = "runs/default"
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    student: TrainConfig = Field(default_factory=TrainConfig.student_defaults)
    loss: LossWeights = Field(default_factory=LossWeights)
    data: DataPaths = Field(default_factory=DataPaths)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)

    @model_validator(mode="after")
    def _propagate_seed(self) -> "RunConfig":
        # 所有随机性都来自顶层种子
        self.model.seed = self.seed
        self.train.seed = self.seed
        self.student.seed = self.seed
        self.synthetic.seed = self.seed
        return self


SECTION_DELIMITER = "__"


def _scan_key_lines(path: Path) -> Dict[str, int]:
    """记录每个配置键首次出现的行号"""
    lines = {}
    with open(path, encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key = line.split("=", 1)[0].strip()
            if key.startswith("export "):
                key = key[len("export "):].strip()
            lines.setdefault(key.upper(), number)
    return lines


def _nest(flat: Dict[str, str], key_lines: Dict[str, int]) -> Dict[str, Any]:
    """把 SECTION__FIELD 形式的扁平键转换为嵌套字典，并拒绝未知键"""
    nested: Dict[str, Any] = {}
    for raw_key, value in flat.items():
        key = raw_key.upper()
        line = key_lines.get(key)
        if value is None or value == "":
            continue
        parts = key.lower().split(SECTION_DELIMITER, 1)
        section = parts[0]
        if section not in RunConfig.model_fields:
            raise ConfigError("未知配置项", key=key, line=line)
        if len(parts) == 1:
            if section not in ("seed", "output_dir"):
                raise ConfigError("配置节必须使用 SECTION__FIELD 形式", key=key, line=line)
            nested[section] = value
            continue
        section_model = RunConfig.model_fields[section].annotation
        field = parts[1]
        if field not in section_model.model_fields:
            raise ConfigError("未知配置项", key=key, line=line)
        nested.setdefault(section, {})[field] = value
    return nested


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    """
    读取运行配置

    Args:
        path: dotenv 格式的配置文件路径，None 表示全部使用默认值
        overrides: 额外覆盖项（例如命令行的 --seed/--out），键同配置文件

    Returns:
        RunConfig: 校验后的运行配置
    """
    flat: Dict[str, Optional[str]] = {}
    key_lines: Dict[str, int] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"配置文件不存在: {config_path}")
        key_lines = _scan_key_lines(config_path)
        flat.update({k.upper(): v for k, v in dotenv_values(config_path).items()})
    for key, value in (overrides or {}).items():
        flat[key.upper()] = None if value is None else str(value)

    nested = _nest(flat, key_lines)
    try:
        return RunConfig.model_validate(nested)
    except ValidationError as e:
        first = e.errors()[0]
        loc = [str(p) for p in first["loc"]]
        key = SECTION_DELIMITER.join(loc[:2]).upper() if loc else None
        raise ConfigError(first["msg"], key=key, line=key_lines.get(key)) from e


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def dump_run_config(config: RunConfig) -> str:
    """把运行配置序列化为规范化的 dotenv 文本（键排序，省略空值）"""
    data = config.model_dump(mode="json")
    lines = []
    for name, value in data.items():
        if isinstance(value, dict):
            for field, sub_value in value.items():
                if sub_value is None or sub_value == []:
                    continue
                lines.append(f"{name}{SECTION_DELIMITER}{field}".upper() + f"={_format_value(sub_value)}")
        else:
            lines.append(f"{name.upper()}={_format_value(value)}")
    return "\n".join(sorted(lines)) + "\n"
