from __future__ import annotations

import json
import logging
import os
from typing import Any

PACKAGE_LOGGER = "fdia_dae"
_TRUTHY = {"1", "true", "yes", "on"}


def _get_log_level() -> int:
    raw = os.getenv("FDIA_LOG_LEVEL", "INFO").upper()
    return getattr(logging, raw, logging.INFO)


def configure_logging() -> logging.Logger:
    level = _get_log_level()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(message)s")
    logger = logging.getLogger(PACKAGE_LOGGER)
    logger.setLevel(level)
    logger.propagate = False

    if not logger.handlers:
        stream = logging.StreamHandler()
        stream.setLevel(level)
        stream.setFormatter(fmt)
        logger.addHandler(stream)

        log_file = os.getenv("FDIA_LOG_FILE")
        if log_file:
            file_handler = logging.FileHandler(log_file, encoding="utf-8")
            file_handler.setLevel(level)
            file_handler.setFormatter(fmt)
            logger.addHandler(file_handler)

    return logger


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(f"{PACKAGE_LOGGER}.{name}")


def log_payloads_enabled() -> bool:
    return os.getenv("FDIA_LOG_PAYLOADS", "").lower() in _TRUTHY


def log_json(logger: logging.Logger, label: str, data: Any) -> None:
    payloads = log_payloads_enabled()
    if not (payloads or logger.isEnabledFor(logging.DEBUG)):
        return
    try:
        text = json.dumps(data, ensure_ascii=True)
    except Exception:
        text = str(data)
    max_chars = int(os.getenv("FDIA_LOG_MAX_CHARS", "4000"))
    if len(text) > max_chars:
        text = text[:max_chars] + "...(truncated)"
    if payloads:
        logger.info("%s %s", label, text)
    else:
        logger.debug("%s %s", label, text)
