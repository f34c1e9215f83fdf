"""Structured logging for drlkit runs.

Records go to one stream handler, as JSON lines or plain text. Every record
carries the run id and root seed once the CLI has called set_run_context(),
and training records attach their numbers under ``extra={"metrics": {...}}``.
"""

import json
import logging
import os
from datetime import datetime, timezone
from typing import Optional

_CONTEXT_KEYS = ("run_id", "seed")
_TEXT_FORMAT = "%(asctime)s %(levelname)-7s %(name)s [%(run_id)s]: %(message)s"

_run_context: dict = {}


def set_run_context(run_id: Optional[str] = None, seed: Optional[int] = None) -> None:
    """Replace the identity stamped onto subsequent records."""
    _run_context.clear()
    _run_context.update({k: v for k, v in zip(_CONTEXT_KEYS, (run_id, seed)) if v is not None})


class RunContextFilter(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:
        for key, value in _run_context.items():
            if not hasattr(record, key):
                setattr(record, key, value)
        return True


class JSONFormatter(logging.Formatter):
    """One JSON object per record: UTC timestamp, level, logger, message,
    then run context, metrics and exception text when present."""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "timestamp": datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        payload.update({key: getattr(record, key) for key in _CONTEXT_KEYS if hasattr(record, key)})
        metrics = getattr(record, "metrics", None)
        if isinstance(metrics, dict):
            payload["metrics"] = metrics
        if record.exc_info and record.exc_info[1]:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


class _TextFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        if not hasattr(record, "run_id"):
            record.run_id = "-"
        return super().format(record)


def _formatter(name: str) -> logging.Formatter:
    if name == "text":
        return _TextFormatter(_TEXT_FORMAT, datefmt="%H:%M:%S")
    return JSONFormatter()


def configure_logging(level: Optional[str] = None) -> None:
    """Install the drlkit handler on the root logger, dropping any others.

    LOG_FORMAT picks json (default) or text; LOG_LEVEL sets the level unless
    ``level`` is given.
    """
    level_name = (level or os.getenv("LOG_LEVEL") or "INFO").upper()
    handler = logging.StreamHandler()
    handler.setFormatter(_formatter(os.getenv("LOG_FORMAT", "json").strip().lower()))
    handler.addFilter(RunContextFilter())

    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.getLevelNamesMapping().get(level_name, logging.INFO))
    logging.getLogger("asyncio").setLevel(logging.WARNING)
