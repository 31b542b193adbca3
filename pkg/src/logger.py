import copy
import logging
import os
import sys
from typing import Optional, TextIO

import colorama

LOGGER_NAME = "swle"
SUCCESS_LEVEL = 25
FILE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class ColoredFormatter(logging.Formatter):
    """Level-colored console lines; the record itself is left untouched for other handlers"""

    COLORS = {
        "DEBUG": colorama.Fore.CYAN,
        "INFO": colorama.Fore.GREEN,
        "SUCCESS": colorama.Fore.LIGHTGREEN_EX,
        "WARNING": colorama.Fore.YELLOW,
        "ERROR": colorama.Fore.RED,
        "CRITICAL": colorama.Fore.LIGHTRED_EX,
    }

    def format(self, record):
        color = self.COLORS.get(record.levelname)
        if color is None:
            return super().format(record)
        record = copy.copy(record)
        record.levelname = f"{color}{record.levelname}{colorama.Fore.RESET}"
        record.msg = f"{color}{record.getMessage()}{colorama.Fore.RESET}"
        record.args = None
        return super().format(record)


def supports_color(stream: TextIO) -> bool:
    if os.environ.get("NO_COLOR"):
        return False
    if "COLORTERM" in os.environ or os.environ.get("TERM_PROGRAM", "").startswith(("iTerm", "Apple")):
        return True
    return hasattr(stream, "isatty") and stream.isatty() and sys.platform != "win32"


def _install_success_level():
    logging.addLevelName(SUCCESS_LEVEL, "SUCCESS")
    if not hasattr(logging.Logger, "success"):
        def success(self, message, *args, **kwargs):
            if self.isEnabledFor(SUCCESS_LEVEL):
                self._log(SUCCESS_LEVEL, message, args, **kwargs)
        logging.Logger.success = success


class SwleLogger:
    """Console/file handlers of the ``swle`` logger tree.

    Library modules log through ``swle.<area>`` children and never add
    handlers themselves; the command line configures the tree once per run.
    """

    def __init__(self, level: str = "INFO", log_file: Optional[str] = None, enable_colors: bool = True,
                 stream: Optional[TextIO] = None):
        colorama.just_fix_windows_console()
        _install_success_level()
        stream = stream or sys.stdout
        self.enable_colors = enable_colors and supports_color(stream)
        self.logger = logging.getLogger(LOGGER_NAME)
        self.logger.setLevel(getattr(logging, level.upper(), logging.INFO))
        self.logger.propagate = False

        for handler in self.logger.handlers[:]:
            self.logger.removeHandler(handler)
            handler.close()

        console = logging.StreamHandler(stream)
        console.setFormatter(ColoredFormatter("%(levelname)s: %(message)s") if self.enable_colors
                             else logging.Formatter("%(levelname)s: %(message)s"))
        self.logger.addHandler(console)

        if log_file:
            file_handler = logging.FileHandler(log_file, encoding="utf-8")
            file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
            file_handler.setLevel(logging.DEBUG)
            self.logger.addHandler(file_handler)

    def get_logger(self) -> logging.Logger:
        return self.logger


_logger_instance: Optional[SwleLogger] = None


def get_logger(level: str = "INFO", log_file: Optional[str] = None, enable_colors: bool = True) -> logging.Logger:
    """(Re)configure the ``swle`` handlers and return the top-level logger"""
    global _logger_instance
    _logger_instance = SwleLogger(level, log_file, enable_colors)
    return _logger_instance.get_logger()


def get_module_logger(area: str) -> logging.Logger:
    """Child logger ``swle.<area>``; records reach whatever handlers get_logger() installed"""
    _install_success_level()
    return logging.getLogger(f"{LOGGER_NAME}.{area}")
