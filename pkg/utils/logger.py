import logging
import sys

from settings import LOG_LEVEL


class ColorFormatter(logging.Formatter):
    COLORS = {
        "DEBUG": "\033[36m",  # Cyan
        "INFO": "\033[32m",  # Green
        "WARNING": "\033[33m",  # Yellow
        "ERROR": "\033[31m",  # Red
        "CRITICAL": "\033[41m",  # Red background
    }
    RESET = "\033[0m"

    def __init__(self, fmt: str, datefmt: str, use_color: bool = True):
        super().__init__(fmt, datefmt=datefmt)
        self.use_color = use_color

    def format(self, record):
        log_message = super().format(record)
        if not self.use_color:
            return log_message
        color = self.COLORS.get(record.levelname, "")
        return f"{color}{log_message}{self.RESET}" if color else log_message


class LabLogger:
    """Per-module logger writing to stderr; stdout carries CSV/JSON data only."""

    def __init__(self, name: str, level: int | str = LOG_LEVEL):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(level)
        self.logger.handlers.clear()

        stream = sys.stderr
        console_handler = logging.StreamHandler(stream)
        console_handler.setLevel(logging.DEBUG)

        formatter = ColorFormatter(
            "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
            use_color=hasattr(stream, "isatty") and stream.isatty(),
        )
        console_handler.setFormatter(formatter)
        self.logger.addHandler(console_handler)

        self.logger.propagate = False

    def set_level(self, level: int | str):
        self.logger.setLevel(level)

    def debug(self, msg: str):
        self.logger.debug(msg)

    def info(self, msg: str):
        self.logger.info(msg)

    def warning(self, msg: str):
        self.logger.warning(msg)

    def error(self, msg: str):
        self.logger.error(msg)

    def critical(self, msg: str):
        self.logger.critical(msg)

    def exception(self, msg: str):
        self.logger.exception(msg)


_registry: dict[str, LabLogger] = {}


def get_logger(name: str, level: int | str = LOG_LEVEL) -> LabLogger:
    if name not in _registry:
        _registry[name] = LabLogger(name, level)
    return _registry[name]


def set_global_level(level: int | str):
    """Applies a level to every logger created so far (used by --verbose)."""
    for lab_logger in _registry.values():
        lab_logger.set_level(level)
