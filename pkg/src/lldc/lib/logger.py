"""
MODULE:      Logging bootstrap
FILE:        src/lldc/lib/logger.py
DESCRIPTION: Console handler with bracket tags plus an optional JSON file
             handler under logs/ (one record per line, structured extras).
"""
from __future__ import annotations

import logging
from pathlib import Path

from pythonjsonlogger.json import JsonFormatter

BASE_DIR = Path(__file__).resolve().parent.parent.parent.parent
LOG_DIR = BASE_DIR / "logs"

ROOT_LOGGER = "lldc"
_CONSOLE_FORMAT = "[%(levelname)s] %(message)s"
_JSON_FIELDS = "%(asctime)s %(levelname)s %(name)s %(message)s"


def get_logger(name: str) -> logging.Logger:
    if not name.startswith(ROOT_LOGGER):
        name = f"{ROOT_LOGGER}.{name}"
    return logging.getLogger(name)


def configure_logging(level: str = "INFO", log_file: str | None = None) -> Path | None:
    """Installs handlers on the package root logger. Idempotent.

    Returns the path of the JSON log file when one was requested.
    """
    root = logging.getLogger(ROOT_LOGGER)
    root.setLevel(level.upper())
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter(_CONSOLE_FORMAT))
    root.addHandler(console)

    path = None
    if log_file:
        LOG_DIR.mkdir(parents=True, exist_ok=True)
        path = Path(log_file) if Path(log_file).is_absolute() else LOG_DIR / log_file
        fh = logging.FileHandler(path, encoding="utf-8")
        fh.setFormatter(JsonFormatter(_JSON_FIELDS))
        root.addHandler(fh)
    root.propagate = False
    return path
