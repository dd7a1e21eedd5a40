import logging
import os
import sys


def configure_logger(logger):
    level = getattr(logging, os.getenv("LOG_LEVEL", "INFO").upper(), logging.INFO)
    logger.setLevel(level)

    # A module imported twice must not print every record twice
    if any(getattr(handler, "_kidney_handler", False) for handler in logger.handlers):
        return

    # Create a console handler that logs to stderr
    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(level)
    handler._kidney_handler = True

    # Create a formatter with a timestamp
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    handler.setFormatter(formatter)

    logger.addHandler(handler)
    logger.propagate = False
