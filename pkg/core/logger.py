"""
日志管理模块
使用 loguru 进行统一的日志记录
"""
import sys
from pathlib import Path
from typing import Optional

from loguru import logger
from core.config import settings


def setup_logger(log_dir: Optional[str] = None, level: Optional[str] = None):
    """
    配置日志系统

    Args:
        log_dir: 文件日志目录，None 时使用环境配置
        level: 日志级别，None 时使用环境配置
    """
    level = level or settings.log_level

    # 移除已有的日志处理器
    logger.remove()

    # 添加控制台输出
    logger.add(
        sys.stdout,
        level=level,
        format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>",
        colorize=True
    )

    # 添加文件输出
    if settings.log_to_file:
        target = Path(log_dir or settings.log_dir)
        logger.add(
            str(target / "affect_{time:YYYY-MM-DD}.log"),
            level=level,
            format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}",
            rotation="1 day",
            retention="30 days",
            compression="zip"
        )

    return logger


def kv(**fields) -> str:
    """把字段格式化为可机器解析的 key=value 串"""
    parts = []
    for key, value in fields.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        parts.append(f"{key}={value}")
    return " ".join(parts)


# 初始化日志系统
setup_logger()

# 导出logger实例
__all__ = ["logger", "kv", "setup_logger"]
