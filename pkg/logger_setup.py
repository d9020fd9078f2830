#!/usr/bin/env python3
"""
logger_setup.py
Logging configuration for the influence toolkit
"""

import logging

from config import LOGGER_NAME

FORMAT = "%(asctime)s %(levelname)s: %(message)s"


def setup_logger(name=LOGGER_NAME, level=logging.INFO, log_file=None):
    """Set up and return a configured logger"""
    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Create console handler if it doesn't exist
    if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler)
               for h in logger.handlers):
        ch = logging.StreamHandler()
        ch.setFormatter(logging.Formatter(FORMAT))
        logger.addHandler(ch)

    if log_file:
        fh = logging.FileHandler(log_file, encoding="utf-8")
        fh.setFormatter(logging.Formatter(FORMAT))
        logger.addHandler(fh)

    return logger


def get_logger(module):
    """Child logger for a toolkit module; propagates to the configured root"""
    return logging.getLogger(f"{LOGGER_NAME}.{module}")
