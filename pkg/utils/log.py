"""
Logging setup
Stdout logging with the same line format as the Celery worker
"""

import logging
import os
import sys

LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'


def setup_logging(level: str = None):
    """Configure root logging to stdout once per process"""
    level = (level or os.getenv('DCDNET_LOG_LEVEL', 'INFO')).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True
    )


def banner(logger: logging.Logger, phase: str, state: str, **fields):
    """Phase boundary line, e.g. '=== TRAIN START === seed=0 epochs=10'"""
    detail = ' '.join(f"{key}={value}" for key, value in fields.items())
    logger.info(f"=== {phase.upper()} {state.upper()} === {detail}".rstrip())
