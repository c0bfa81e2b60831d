"""
Configuration Helper
Process-level settings from the environment / .env file, and logging setup
"""

import logging
import os
from typing import Optional

from dotenv import load_dotenv

load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

DEFAULTS = {
    "KITBASH_THREADS": "1",
    "KITBASH_LOG_LEVEL": "INFO",
    "KITBASH_OUTPUT_DIR": "out",
}


def get_setting(key: str, default: Optional[str] = None) -> Optional[str]:
    """Get a setting from the environment, falling back to built-in defaults"""
    value = os.getenv(key)
    if value:
        return value
    if default is not None:
        return default
    return DEFAULTS.get(key)


def get_int_setting(key: str, default: Optional[int] = None) -> int:
    from errors import ValidationError

    raw = get_setting(key, None if default is None else str(default))
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise ValidationError(f"setting {key} must be an integer, got {raw!r}")


def configure_logging(level: Optional[str] = None) -> None:
    """Install a single stream handler on the root logger"""
    level_name = (level or get_setting("KITBASH_LOG_LEVEL") or "INFO").upper()
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(getattr(logging, level_name, logging.INFO))
