import logging
import os
import sys
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Iterator

SERVICE = "membrane-lab"
RECORD_FORMAT = "%(asctime)s [%(service)s:%(command)s] %(levelname)s: %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


class CustomFormatter(logging.Formatter):
    """Colored console format; plain when color is off (NO_COLOR or a non-tty stream)"""

    COLORS = {
        logging.DEBUG: "\x1b[38;21m",
        logging.INFO: "\x1b[38;5;39m",
        logging.WARNING: "\x1b[38;5;226m",
        logging.ERROR: "\x1b[38;5;196m",
        logging.CRITICAL: "\x1b[31;1m",
    }
    RESET = "\x1b[0m"

    def __init__(self, use_color: bool = True):
        super().__init__(RECORD_FORMAT, datefmt=DATE_FORMAT)
        self.use_color = use_color

    def format(self, record):
        text = super().format(record)
        if not self.use_color:
            return text
        return f"{self.COLORS.get(record.levelno, '')}{text}{self.RESET}"


class ContextFilter(logging.Filter):
    """Stamps records with the service name and the command being run"""

    def __init__(self):
        super().__init__()
        self.fields = {"service": SERVICE, "command": "-"}

    def filter(self, record):
        for key, value in self.fields.items():
            if not hasattr(record, key):
                setattr(record, key, value)
        return True


def _console_handler() -> logging.Handler:
    # stdout carries artifact paths; logs go to stderr
    handler = logging.StreamHandler(sys.stderr)
    level = os.getenv("MBR4_LOG_LEVEL", "INFO").upper()
    handler.setLevel(getattr(logging, level, logging.INFO))
    use_color = "NO_COLOR" not in os.environ and sys.stderr.isatty()
    handler.setFormatter(CustomFormatter(use_color))
    return handler


def _file_handler(path: Path, level: int) -> logging.Handler:
    handler = logging.FileHandler(path)
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(RECORD_FORMAT, datefmt=DATE_FORMAT))
    return handler


class Logger:
    """Process-wide logger for the membrane laboratory"""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(Logger, cls).__new__(cls)
            cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return

        logs_dir = Path(os.getenv("MBR4_LOG_DIR", "logs"))
        logs_dir.mkdir(parents=True, exist_ok=True)

        self.logger = logging.getLogger("membrane_lab")
        self.logger.setLevel(logging.DEBUG)
        self.logger.propagate = False
        self.context = ContextFilter()

        if not self.logger.handlers:
            handlers = [
                _console_handler(),
                _file_handler(logs_dir / f"membrane_{datetime.now().strftime('%Y%m%d')}.log", logging.DEBUG),
                _file_handler(logs_dir / "errors.log", logging.ERROR),
            ]
            for handler in handlers:
                handler.addFilter(self.context)
                self.logger.addHandler(handler)

        self._initialized = True

    @contextmanager
    def command(self, name: str) -> Iterator[None]:
        """Tag records emitted inside the block with a CLI command name"""
        previous = self.context.fields["command"]
        self.context.fields["command"] = name
        try:
            yield
        finally:
            self.context.fields["command"] = previous

    def info(self, message: str):
        self.logger.info(message)

    def error(self, message: str):
        self.logger.error(message)

    def warning(self, message: str):
        self.logger.warning(message)

    def debug(self, message: str):
        self.logger.debug(message)

    def solver(self, message: str):
        """Linear-solver diagnostics (tier choice, factor sizes, CG residuals)"""
        self.logger.debug(f"SOLVER: {message}")


logger = Logger()
