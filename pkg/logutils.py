# SPDX-License-Identifier: GPL-3.0-only

import logging
import os
from typing import Optional

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _resolve_level(name: str) -> int:
    level = getattr(logging, name.upper(), None)
    if not isinstance(level, int):
        raise ValueError(f"Invalid log level: {name}")
    return level


LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()

logging.basicConfig(level=_resolve_level(LOG_LEVEL), format=LOG_FORMAT)


def set_level(name: str) -> None:
    """Change the root log level at runtime (used by the CLI's --log-level)."""
    logging.getLogger().setLevel(_resolve_level(name))


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """
    Retrieves a logger instance configured with the specified name.

    Args:
        name (str, optional): The name of the logger. If None, the root logger is
            returned.

    Returns:
        logging.Logger: A configured logger instance.
    """
    return logging.getLogger(name)
