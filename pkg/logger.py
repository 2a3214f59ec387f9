"""
Logger setup shared by every module: JSON records to the console and, optionally, to a dated file.
"""
import json
import logging
import sys
from datetime import datetime
from typing import Optional

ROOT_LOGGER_NAME = "refu"


class JsonFormatter(logging.Formatter):
    """Format log records as JSON with message, level, and other standard fields."""

    def format(self, record: logging.LogRecord) -> str:
        log_obj = {
            "timestamp": self.formatTime(record, self.datefmt),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        fields = getattr(record, "fields", None)
        if isinstance(fields, dict):
            log_obj.update(fields)
        if record.exc_info:
            log_obj["exception"] = self.formatException(record.exc_info)
        return json.dumps(log_obj, default=str)


def dated_log_file(log_file: str) -> str:
    """Insert the current date before the extension: run.log -> run_2024-01-31.log"""
    stamp = datetime.now().strftime("%Y-%m-%d")
    if '.' in log_file:
        stem, ext = log_file.rsplit('.', 1)
        return f"{stem}_{stamp}.{ext}"
    return log_file + f"_{stamp}.log"


def setup_logger(name: str = ROOT_LOGGER_NAME, log_file: Optional[str] = None,
                 level: int = logging.INFO) -> logging.Logger:
    """
    Sets up a logger with the specified name, optional log file, and logging level.

    Calling it twice for the same name replaces the handlers instead of stacking them.

    Args:
        name (str): The name of the logger. Defaults to the package root so every
            component logger inherits the handlers.
        log_file (str, optional): File path for the log records. The current date is
            appended to the file name. Defaults to None (console only).
        level (int, optional): The logging level. Defaults to logging.INFO.

    Returns:
        logging.Logger: Configured logger instance.

    Example:
        logger = setup_logger('refu', 'refu.log')
        logger.info('This is an info message')
    """
    formatter = JsonFormatter()
    logger = logging.getLogger(name)
    logger.setLevel(level)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file:
        handler = logging.FileHandler(dated_log_file(log_file))
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    logger.propagate = False
    return logger


def get_logger(component: str) -> logging.Logger:
    """Component logger under the package root, e.g. get_logger('sdf') -> 'refu.sdf'."""
    return logging.getLogger(f"{ROOT_LOGGER_NAME}.{component}")
