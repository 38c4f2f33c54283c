"""
logger.py.

JSON logging configuration for the toolkit.

Every record is rendered as one JSON object, including any `extra` fields.
`setup_logger` puts a console handler (stderr) and a rotating file handler
on the root logger. Library modules only call `logging.getLogger(__name__)`;
handlers are attached once, by the command-line entry point.

Directory Structure
-------------------
- logs/
    - saeipw.log  (auto-created with rotation enabled)

Usage
-----
    >>> from saeipw.logger import setup_logger
    >>> logger = setup_logger()
    >>> logger.info("study started", extra={"scenario": "1a"})

Example Output
--------------
    {
        "timestamp": "2026-03-02T09:14:05",
        "level": "WARNING",
        "logger": "saeipw.model.lmm",
        "message": "variance component at boundary",
        "pathname": ".../saeipw/model/lmm.py",
        "lineno": 210,
        "component": "sigma2_gamma"
    }
"""

import json
import logging
import os
from logging.handlers import RotatingFileHandler
from typing import Any

from saeipw.settings import get_settings

_RESERVED = frozenset(
    (
        "name",
        "msg",
        "args",
        "levelname",
        "levelno",
        "pathname",
        "filename",
        "module",
        "exc_info",
        "exc_text",
        "stack_info",
        "lineno",
        "funcName",
        "created",
        "msecs",
        "relativeCreated",
        "thread",
        "threadName",
        "processName",
        "process",
        "message",
        "taskName",
    )
)
_HANDLER_TAG = "_saeipw_handler"


# -------------------------------------------------------------------------
# Custom Formatter
# -------------------------------------------------------------------------
class JsonFormatter(logging.Formatter):
    """
    Serialise log records as single-line JSON objects.

    Attributes passed through ``extra=`` are copied into the object, so
    numerical warnings can carry the area, unit or component they concern.
    """

    def format(self, record: logging.LogRecord) -> str:
        """
        Format a log record as a JSON string.

        Parameters
        ----------
        record : logging.LogRecord
            The log record to format.

        Returns
        -------
        str
            JSON-encoded record.
        """
        log_record: dict[str, Any] = {
            "timestamp": self.formatTime(record, "%Y-%m-%dT%H:%M:%S"),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "pathname": record.pathname,
            "lineno": record.lineno,
        }

        if record.exc_info:
            log_record["exception"] = self.formatException(record.exc_info)

        for key, value in record.__dict__.items():
            if key not in _RESERVED and not key.startswith("_"):
                log_record[key] = value

        return json.dumps(log_record, default=str)


# -------------------------------------------------------------------------
# Logger Setup
# -------------------------------------------------------------------------
def setup_logger(
    level: str | None = None, log_dir: str | None = None
) -> logging.Logger:
    """
    Set up the root logger with console and rotating file handlers.

    The console handler writes to stderr so command output on stdout stays
    clean. Calling the function again replaces the handlers it installed
    earlier instead of stacking new ones.

    Parameters
    ----------
    level : str, optional
        Logging level; defaults to ``SAEIPW_LOG_LEVEL``.
    log_dir : str, optional
        Log directory; defaults to ``SAEIPW_LOG_DIR``.

    Returns
    -------
    logging.Logger
        The configured root logger.
    """
    settings = get_settings()
    level = (level or settings.log_level).upper()
    log_dir = log_dir or settings.log_dir
    os.makedirs(log_dir, exist_ok=True)

    logger = logging.getLogger()
    logger.setLevel(level)
    for handler in list(logger.handlers):
        if getattr(handler, _HANDLER_TAG, False):
            logger.removeHandler(handler)
            handler.close()

    json_formatter = JsonFormatter()

    # Console handler
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(json_formatter)
    setattr(console_handler, _HANDLER_TAG, True)
    logger.addHandler(console_handler)

    # Rotating file handler
    rotating_handler = RotatingFileHandler(
        os.path.join(log_dir, "saeipw.log"),
        maxBytes=500 * 1024,  # 500 KB
        backupCount=5,
    )
    rotating_handler.setFormatter(json_formatter)
    setattr(rotating_handler, _HANDLER_TAG, True)
    logger.addHandler(rotating_handler)

    return logger
