"""
异常定义模块
按类别划分的错误类型，命令行根据 exit_code 返回非零退出码
"""


class AffectError(Exception):
    """工具包基础异常"""

    exit_code: int = 1
    category: str = "error"


class InputValidationError(AffectError, ValueError):
    """输入校验失败（非有限值、取值越界、长度不匹配等）"""

    exit_code = 3
    category = "validation"


class InputShapeError(InputValidationError):
    """图像尺寸与模型配置不一致"""

    category = "input-shape"


class DegenerateSampleError(InputValidationError):
    """样本三个任务的标签全部缺失"""

    category = "degenerate-sample"


class FusionError(AffectError, RuntimeError):
    """特征金字塔融合时出现通道或尺寸不一致"""

    exit_code = 5
    category = "internal-consistency"


class ManifestParseError(AffectError, ValueError):
    """清单文件格式错误"""

    exit_code = 4
    category = "parse"

    def __init__(self, message: str, row: int = None):
        self.row = row
        if row is not None:
            message = f"第 {row} 行: {message}"
        super().__init__(message)


class MergeError(AffectError, ValueError):
    """数据集合并冲突"""

    exit_code = 4
    category = "merge"


class AlignmentError(AffectError, ValueError):
    """预测与标签的样本ID无法对齐"""

    exit_code = 4
    category = "alignment"


class CompletenessError(AffectError, ValueError):
    """补全标签未覆盖全部缺失的 (样本, 任务) 组合"""

    exit_code = 4
    category = "completeness"


class CheckpointError(AffectError, ValueError):
    """检查点版本或配置不匹配"""

    exit_code = 6
    category = "checkpoint"


class AnalysisError(AffectError, ValueError):
    """检查点结构不满足分析前提"""

    exit_code = 6
    category = "analysis"


class TrainingError(AffectError, RuntimeError):
    """训练过程中出现非有限损失"""

    exit_code = 7
    category = "training"

    def __init__(self, message: str, batch_ids: list = None):
        self.batch_ids = list(batch_ids or [])
        super().__init__(message)


class DataIOError(AffectError, OSError):
    """文件读写失败"""

    exit_code = 8
    category = "io"


class ConfigError(AffectError, ValueError):
    """运行配置错误"""

    exit_code = 2
    category = "config"

    def __init__(self, message: str, key: str = None, line: int = None):
        self.key = key
        self.line = line
        prefix = ""
        if key is not None:
            prefix = f"配置项 {key}"
            if line is not None:
                prefix += f" (第 {line} 行)"
            prefix += ": "
        super().__init__(prefix + message)


class InternalError(AffectError, RuntimeError):
    """未归类的运行时错误（如 torch 内部异常）"""

    exit_code = 1
    category = "internal"


def classify_error(error: Exception) -> AffectError:
    """
    把命令边界上的非工具包异常映射为对应类别

    Args:
        error: 原始异常

    Returns:
        AffectError: 已归类的异常，原始异常保存在 __cause__ 中
    """
    if isinstance(error, AffectError):
        return error
    if isinstance(error, ValueError):
        # pydantic.ValidationError 也是 ValueError
        wrapped = InputValidationError(str(error))
    elif isinstance(error, OSError):
        wrapped = DataIOError(str(error))
    else:
        wrapped = InternalError(f"{type(error).__name__}: {error}")
    wrapped.__cause__ = error
    return wrapped
