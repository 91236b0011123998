"""
Logging configuration for powerstack.

Console output is coloured on a TTY; simulation runs additionally get
rotating log files inside their run directory.
"""

import sys
import logging
import logging.handlers
from datetime import datetime
from pathlib import Path
from typing import Optional, TextIO

CONSOLE_FORMAT = '%(asctime)s %(levelname)s [%(name)s] %(message)s'
FILE_FORMAT = '%(asctime)s | %(levelname)-8s | %(name)-24s | %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


class ColoredFormatter(logging.Formatter):
    """Formatter that adds colors to console output."""

    COLORS = {
        'DEBUG': '\033[36m',     # Cyan
        'INFO': '\033[32m',      # Green
        'WARNING': '\033[33m',   # Yellow
        'ERROR': '\033[31m',     # Red
        'CRITICAL': '\033[41m',  # Red background
    }
    RESET = '\033[0m'

    def format(self, record):
        # Color a copy so file handlers keep the plain level name
        record = logging.makeLogRecord(record.__dict__)
        color = self.COLORS.get(record.levelname, '')
        record.levelname = f"{color}{record.levelname}{self.RESET}"
        return super().format(record)


def _rotating_file(path: Path, level: int, max_mb: int, backups: int, formatter: logging.Formatter) -> logging.Handler:
    handler = logging.handlers.RotatingFileHandler(
        path, maxBytes=max_mb * 1024 * 1024, backupCount=backups, encoding='utf-8',
    )
    handler.setLevel(level)
    handler.setFormatter(formatter)
    return handler


def setup_logging(
    level: int = logging.INFO,
    log_dir: Optional[Path] = None,
    log_to_console: bool = True,
    run_name: Optional[str] = None,
    stream: Optional[TextIO] = None,
) -> logging.Logger:
    """
    Configure the root logger.

    Args:
        level: Logging level (default: INFO)
        log_dir: When given, rotating log files are written into this directory
        log_to_console: Enable console logging
        run_name: If provided (and log_dir is set), also write <run_name>.log
        stream: Console stream (default: stderr, stdout carries command output)

    Returns:
        Configured root logger
    """
    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)
        handler.close()

    if log_to_console:
        stream = stream or sys.stderr
        console_handler = logging.StreamHandler(stream)
        console_handler.setLevel(level)
        if hasattr(stream, 'isatty') and stream.isatty():
            formatter = ColoredFormatter(CONSOLE_FORMAT, datefmt=DATE_FORMAT)
        else:
            formatter = logging.Formatter(CONSOLE_FORMAT, datefmt=DATE_FORMAT)
        console_handler.setFormatter(formatter)
        root_logger.addHandler(console_handler)

    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        formatter = logging.Formatter(FILE_FORMAT, datefmt=DATE_FORMAT)
        # (file, level, MB per file, backups)
        files = [('powerstack.log', level, 10, 5), ('errors.log', logging.ERROR, 5, 3)]
        if run_name:
            files.append((f"{run_name}.log", level, 5, 3))
        for name, file_level, max_mb, backups in files:
            root_logger.addHandler(_rotating_file(log_dir / name, file_level, max_mb, backups, formatter))

    return root_logger


def get_logger(name: str) -> logging.Logger:
    """Logger for a powerstack component (e.g. 'sim', 'replay')."""
    return logging.getLogger(f'powerstack.{name}')


class RunLogContext:
    """Context manager for logging a long-running operation with timing."""

    def __init__(self, name: str, operation: str = 'run'):
        self.name = name
        self.operation = operation
        self.logger = get_logger(name)
        self.start_time = None

    def __enter__(self):
        self.start_time = datetime.now()
        self.logger.info(f"Starting {self.operation}...")
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        duration = (datetime.now() - self.start_time).total_seconds()

        if exc_type is None:
            self.logger.info(f"Completed {self.operation} in {duration:.2f}s")
        else:
            self.logger.error(f"Failed {self.operation} after {duration:.2f}s: {exc_val}")

        return False  # Don't suppress exceptions


def log_run_stats(logger: logging.Logger, stats: dict):
    """Log run statistics as one key=value line."""
    logger.info("Stats: " + ", ".join(f"{key}={value}" for key, value in stats.items()))
