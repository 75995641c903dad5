"""Process-wide logging setup: plain text or one JSON object per line."""

import json
import logging
import logging.config
from typing import Any


class StructuredFormatter(logging.Formatter):
    """Formats each record as a single-line JSON object"""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "timestamp": self.formatTime(record, self.datefmt),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload)


def logging_config(level: str = "INFO", log_format: str = "plain") -> dict[str, Any]:
    """dictConfig for the console handler"""
    return {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "structured": {
                "()": StructuredFormatter,
                "datefmt": "%Y-%m-%dT%H:%M:%S%z",
            },
            "default": {
                "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            },
        },
        "handlers": {
            "console": {
                "class": "logging.StreamHandler",
                "formatter": "structured" if log_format == "json" else "default",
                "stream": "ext://sys.stderr",
            },
        },
        "root": {
            "level": level.upper(),
            "handlers": ["console"],
        },
    }


def configure_logging(level: str = "INFO", log_format: str = "plain", quiet: bool = False) -> None:
    """Configure the root logger once; --quiet raises the level to WARNING"""
    logging.config.dictConfig(logging_config("WARNING" if quiet else level, log_format))
