"""Logging configuration for the TATAA toolchain."""

import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path


# Global logger
_logger: logging.Logger | None = None

FILE_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s"


def setup_logging(
    console_level: int = logging.INFO,
    log_file: Path | None = None,
    file_level: int = logging.DEBUG,
) -> logging.Logger:
    """Set up package logging with a console handler and an optional rotating file."""
    global _logger

    if _logger is None:
        _logger = logging.getLogger("tataa")
        _logger.setLevel(logging.DEBUG)
        _logger.propagate = False

        # Console handler - clean output, stderr keeps stdout for disassembly and CSV
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(console_level)
        console_handler.setFormatter(logging.Formatter("%(message)s"))
        _logger.addHandler(console_handler)
    else:
        for handler in _logger.handlers:
            if not isinstance(handler, RotatingFileHandler):
                handler.setLevel(console_level)

    if log_file is not None:
        log_file = Path(log_file)
        already = any(
            isinstance(h, RotatingFileHandler) and Path(h.baseFilename) == log_file.resolve()
            for h in _logger.handlers
        )
        if not already:
            log_file.parent.mkdir(parents=True, exist_ok=True)
            file_handler = RotatingFileHandler(
                log_file,
                maxBytes=5 * 1024 * 1024,  # 5 MB
                backupCount=3,
                encoding="utf-8",
            )
            file_handler.setLevel(file_level)
            file_handler.setFormatter(logging.Formatter(FILE_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
            _logger.addHandler(file_handler)

    return _logger


def get_logger(name: str = "") -> logging.Logger:
    """Get a logger instance, setting up console logging on first use."""
    if _logger is None:
        setup_logging()

    if name:
        return _logger.getChild(name)
    return _logger
