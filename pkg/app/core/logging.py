"""
日志配置
基于loguru：标准错误输出 + 可选的滚动日志文件，标准输出保留给命令结果
"""

import os
import sys
from pathlib import Path
from typing import Optional

from loguru import logger

from app.core.config import settings

LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} - {name} - {level} - {message}"


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """配置日志输出"""
    level = (level or settings.LOG_LEVEL).upper()
    log_file = log_file or settings.LOG_FILE

    logger.remove()

    # NO_COLOR 或非终端时关闭颜色
    colorize = sys.stderr.isatty() and "NO_COLOR" not in os.environ
    logger.add(sys.stderr, level=level, format=LOG_FORMAT, colorize=colorize)

    if log_file:
        log_dir = Path(log_file).parent
        if not log_dir.exists():
            log_dir.mkdir(parents=True, exist_ok=True)
        logger.add(
            log_file,
            level=level,
            format=LOG_FORMAT,
            rotation="10 MB",
            retention=7,
            encoding="utf-8",
        )

    logger.debug(f"日志级别: {level}, 日志文件: {log_file or '无'}")
