from __future__ import annotations

import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

HUMAN_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
_HANDLER_TAG = "_jointaccent_handler"


class JsonLineFormatter(logging.Formatter):
    """One JSON object per record: ts, level, logger, event plus the event's fields."""

    def format(self, record: logging.LogRecord) -> str:
        payload: dict[str, Any] = {
            "ts": datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(timespec="milliseconds"),
            "level": record.levelname,
            "logger": record.name,
            "event": getattr(record, "event", None) or record.getMessage(),
        }
        payload.update(getattr(record, "fields", {}))
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


def log_event(logger: logging.Logger, event: str, level: int = logging.INFO, **fields: Any) -> None:
    if not logger.isEnabledFor(level):
        return
    rendered = " ".join(f"{key}={value}" for key, value in fields.items())
    message = f"{event} {rendered}" if rendered else event
    logger.log(level, message, extra={"event": event, "fields": fields})


def configure_logging(log_dir: str | Path | None = None, level: int = logging.INFO) -> Path | None:
    """Installs the stderr mirror and, given a directory, the run.jsonl sink. Safe to call repeatedly."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, _HANDLER_TAG, False):
            root.removeHandler(handler)
            handler.close()
    root.setLevel(level)

    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter(HUMAN_FORMAT))
    setattr(console, _HANDLER_TAG, True)
    root.addHandler(console)

    if log_dir is None:
        return None
    path = Path(log_dir)
    path.mkdir(parents=True, exist_ok=True)
    sink = path / "run.jsonl"
    file_handler = logging.FileHandler(sink, encoding="utf-8")
    file_handler.setFormatter(JsonLineFormatter())
    setattr(file_handler, _HANDLER_TAG, True)
    root.addHandler(file_handler)
    return sink
