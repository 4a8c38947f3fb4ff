"""Dual logging setup: console + file."""

import logging
import os
from datetime import datetime

from .constants import LOG_DATE_FORMAT, LOG_FILE_PREFIX, LOG_FORMAT


def setup_logging(
    log_dir: str | None = None, level: int = logging.INFO
) -> logging.Logger:
    """Configure root logger with a stderr handler and optional file handler.

    Args:
        log_dir: Directory for log files. If None, only console logging is set up.
        level: Root logger level.

    Returns:
        The root logger instance.
    """
    logger = logging.getLogger()
    logger.setLevel(level)

    # Prevent duplicate handlers on repeated calls (e.g., during testing)
    if logger.handlers:
        return logger

    formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATE_FORMAT)

    # Console handler writes to stderr so CSV on stdout stays clean
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_dir is not None:
        os.makedirs(log_dir, exist_ok=True)
        timestamp = datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
        log_path = os.path.join(log_dir, f"{LOG_FILE_PREFIX}_{timestamp}.log")
        file_handler = logging.FileHandler(log_path)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger
