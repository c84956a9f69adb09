import logging
import sys
from logging.handlers import RotatingFileHandler
from typing import Optional, Union

PACKAGE_LOGGER = "spg_concept_learner"


def setup_logging(log_level: Union[int, str] = logging.INFO,
                  log_file: Optional[str] = None) -> logging.Logger:
    """
    配置包级日志记录器，支持输出到控制台和文件。

    - 记录器名为 'spg_concept_learner'，各模块通过 logging.getLogger(__name__) 继承它。
    - 控制台处理器写 stderr，stdout 留给 CLI 的结果输出，保证结果可逐字节复现。
    - 给出 log_file 时追加 RotatingFileHandler（10MB，保留5个备份）。

    Args:
        log_level: 日志级别，整数或 "DEBUG"/"INFO" 这样的名字。
        log_file: 日志文件路径；None 表示只输出到控制台。

    Returns:
        logging.Logger: 配置好的日志记录器实例。
    """
    if isinstance(log_level, str):
        log_level = logging.getLevelName(log_level.upper())
        if not isinstance(log_level, int):
            log_level = logging.INFO

    logger = logging.getLogger(PACKAGE_LOGGER)
    logger.setLevel(log_level)

    # 防止重复添加 handler
    if logger.hasHandlers():
        logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(logging.Formatter(
        '%(asctime)s - %(levelname)s - %(module)s - %(message)s'
    ))
    logger.addHandler(console_handler)

    if log_file:
        file_handler = RotatingFileHandler(
            log_file, maxBytes=10 * 1024 * 1024, backupCount=5, encoding='utf-8'
        )
        file_handler.setLevel(log_level)
        # 文件日志更详细，包含进程和线程，便于调试长时间的基准运行
        file_handler.setFormatter(logging.Formatter(
            '%(asctime)s - %(levelname)s - %(name)s - %(process)d - %(threadName)s - '
            '%(module)s.%(funcName)s:%(lineno)d - %(message)s'
        ))
        logger.addHandler(file_handler)

    return logger
