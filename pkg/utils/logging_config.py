"""
Logging setup for the command-line driver.
"""
import logging
import os
import sys

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level=None):
    """
    Configure root logging once, on stderr so CSV written to stdout stays clean.

    Args:
        level: level name or number; defaults to the OPE_LOG_LEVEL environment variable

    Returns:
        int: the effective level
    """
    if level is None:
        level = os.getenv("OPE_LOG_LEVEL", "WARNING")
    if isinstance(level, str):
        numeric = logging.getLevelName(level.upper())
        if not isinstance(numeric, int):
            raise ValueError(f"unknown log level: {level}")
        level = numeric
    logging.basicConfig(stream=sys.stderr, format=LOG_FORMAT, level=level, force=True)
    return level
