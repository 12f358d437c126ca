"""
Run Configuration Loader
Plain key=value run files parsed with python-dotenv, flag overrides,
and the resolved config written beside every run
"""

import logging
import os
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

from dotenv.parser import parse_stream
from pydantic import ValidationError

from models import ConfigError, MissingArtifactError, RunConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
KNOWN_KEYS = frozenset(RunConfig.model_fields)


def read_config_file(path: PathLike) -> Dict[str, Tuple[str, int]]:
    """
    Parse a key=value file

    Returns:
        Mapping key -> (raw value, line number)
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file not found: {path}")
    values = {}
    with open(path, encoding='utf-8') as stream:
        for binding in parse_stream(stream):
            line = binding.original.line
            if binding.error:
                raise ConfigError(f"cannot parse '{binding.original.string.strip()}'", line=line)
            if binding.key is None:
                continue
            key = binding.key.strip().lower()
            if key not in KNOWN_KEYS:
                raise ConfigError(f"unknown key '{key}'", line=line)
            values[key] = (binding.value if binding.value is not None else '', line)
    return values


def parse_override(item: str) -> Tuple[str, str]:
    key, sep, value = item.partition('=')
    key = key.strip().lower()
    if not sep or not key:
        raise ConfigError(f"override '{item}' is not key=value")
    if key not in KNOWN_KEYS:
        raise ConfigError(f"unknown key '{key}' in override")
    return key, value.strip()


def load_run_config(path: Optional[PathLike] = None, overrides: Iterable[str] = (),
                    **flags) -> RunConfig:
    """
    File values, then environment defaults for unset process keys, then
    flags and --override items, validated into one RunConfig

    Args:
        path: Optional key=value file
        overrides: 'key=value' strings, applied last
        **flags: Already-typed values from dedicated CLI flags (None means unset)
    """
    overrides = list(overrides)
    raw = read_config_file(path) if path else {}
    lines = {key: line for key, (_, line) in raw.items()}
    values: Dict[str, object] = {key: value for key, (value, _) in raw.items()}

    values.setdefault('device', os.getenv('DCDNET_DEVICE', 'cpu'))
    values.setdefault('out_dir', os.getenv('DCDNET_OUT_DIR', 'runs'))

    for key, value in flags.items():
        if value is not None:
            if key not in KNOWN_KEYS:
                raise ConfigError(f"unknown key '{key}'")
            values[key] = value
            lines.pop(key, None)
    for item in overrides:
        key, value = parse_override(item)
        values[key] = value
        lines.pop(key, None)

    try:
        cfg = RunConfig(**values)
    except ValidationError as e:
        first = e.errors()[0]
        key = str(first['loc'][0]) if first.get('loc') else None
        raise ConfigError(f"{key or 'config'}: {first['msg']}", line=lines.get(key)) from e
    logger.info(f"Config loaded from {path or 'defaults'} with {len(overrides)} override(s)")
    return cfg


def _format_value(value) -> str:
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (list, tuple)):
        return ','.join(str(v) for v in value)
    if isinstance(value, dict):
        return ','.join(f"{k}:{v!r}" for k, v in sorted(value.items()))
    return str(value)


def resolved_text(cfg: RunConfig) -> str:
    """Every key, sorted, in the same key=value format the loader reads"""
    dump = cfg.model_dump()
    return ''.join(f"{key}={_format_value(dump[key])}\n" for key in sorted(dump))


def write_resolved(cfg: RunConfig, directory: PathLike) -> Path:
    path = Path(directory) / 'config.resolved'
    path.write_text(resolved_text(cfg), encoding='utf-8')
    return path
