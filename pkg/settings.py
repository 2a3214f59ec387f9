"""
Process-level settings read from the environment (.env supported).
"""
import logging
import os
from typing import Optional

import numpy as np
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

LOG_FILEPATH: Optional[str] = os.getenv("REFU_LOG_FILEPATH") or None
LOG_LEVEL_NAME: str = os.getenv("REFU_LOG_LEVEL", "INFO").upper()
NUM_WORKERS: int = max(1, int(os.getenv("REFU_NUM_WORKERS", "1")))
FLOAT_DTYPE_NAME: str = os.getenv("REFU_FLOAT_DTYPE", "float64").strip().lower()


def log_level() -> int:
    """
    Numeric log level for REFU_LOG_LEVEL.

    Raises:
        ValueError: If the configured level name is unknown.
    """
    level = logging.getLevelName(LOG_LEVEL_NAME)
    if not isinstance(level, int):
        raise ValueError(f"Unknown log level {LOG_LEVEL_NAME}")
    return level


def float_dtype() -> np.dtype:
    """
    Floating-point type for REFU_FLOAT_DTYPE. All geometry and networks run in float64,
    so the setting is read-only: any other value is rejected.

    Raises:
        ValueError: If the configured type is not float64.
    """
    if FLOAT_DTYPE_NAME != "float64":
        raise ValueError(f"Unsupported float dtype {FLOAT_DTYPE_NAME}, only float64 is supported")
    return np.dtype(np.float64)
