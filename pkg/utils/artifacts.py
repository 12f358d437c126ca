"""
Run Artifacts
Run directories with a single-writer lock, byte-stable CSV tables and JSON summaries
"""

import json
import logging
import os
import time
from pathlib import Path
from typing import Any, Dict, Optional

import pandas as pd

from models import RunConfig, RunLockedError
from utils.config import write_resolved

logger = logging.getLogger(__name__)

LOCK_NAME = '.lock'
FLOAT_FORMAT = '%.6f'


def _plain(value):
    # numpy scalars from DataFrame rows
    if hasattr(value, 'item'):
        return value.item()
    return str(value)


def run_dir_name(cfg: RunConfig) -> str:
    return cfg.run_name or f"{time.strftime('%Y%m%d-%H%M%S')}-seed{cfg.seed}"


class RunDirectory:
    """
    Output directory of one command. Holding the lock file is what makes
    a process the directory's only writer.
    """

    def __init__(self, cfg: RunConfig, name: Optional[str] = None):
        self.cfg = cfg
        self.path = Path(cfg.out_dir) / (name or run_dir_name(cfg))
        self._lock: Optional[Path] = None

    def __enter__(self) -> 'RunDirectory':
        self.path.mkdir(parents=True, exist_ok=True)
        lock = self.path / LOCK_NAME
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockedError(f"{self.path} is locked by another process ({lock})")
        with os.fdopen(fd, 'w') as handle:
            handle.write(str(os.getpid()))
        self._lock = lock
        write_resolved(self.cfg, self.path)
        logger.info(f"Run directory: {self.path}")
        return self

    def __exit__(self, exc_type, exc, tb):
        if self._lock is not None:
            self._lock.unlink(missing_ok=True)
            self._lock = None
        return False

    def file(self, name: str) -> Path:
        return self.path / name

    def write_csv(self, frame: pd.DataFrame, name: str) -> Path:
        path = self.file(name)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
        return path

    def write_markdown(self, text: str, name: str) -> Path:
        path = self.file(name)
        path.write_text(text, encoding='utf-8')
        return path

    def write_json(self, summary: Dict[str, Any], name: str = 'summary.json') -> Path:
        path = self.file(name)
        text = json.dumps(summary, indent=2, sort_keys=True, default=_plain)
        path.write_text(text + '\n', encoding='utf-8')
        return path
