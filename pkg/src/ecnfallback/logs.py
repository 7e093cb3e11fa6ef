"""src/ecnfallback/logs.py
Console logging for the command-line harness.
"""
import logging

from rich.console import Console
from rich.logging import RichHandler

LEVELS = {0: logging.WARNING, 1: logging.INFO}


def configure(verbosity: int = 0, console: Console | None = None) -> logging.Logger:
    """Attaches a single RichHandler to the package logger.

    Calling it again replaces the handler instead of stacking a second one.

    Args:
        verbosity: Number of -v flags given on the command line.
        console: Where to render; stderr by default.
    """
    logger = logging.getLogger("ecnfallback")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = RichHandler(
        console=console or Console(stderr=True),
        show_path=False,
        rich_tracebacks=True,
    )
    handler.setFormatter(logging.Formatter("%(message)s", datefmt="[%X]"))
    logger.addHandler(handler)
    logger.setLevel(LEVELS.get(verbosity, logging.DEBUG))
    logger.propagate = False
    return logger
