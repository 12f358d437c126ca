"""
Checkpoint Storage
Single-file checkpoints with a versioned header, named parameter groups
and a shape manifest checked on load
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch

from models import CheckpointError, MissingArtifactError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'dcdnet-checkpoint'
CHECKPOINT_VERSION = 1

PathLike = Union[str, Path]


def shape_manifest(state: Dict[str, torch.Tensor]) -> Dict[str, list]:
    return {key: list(value.shape) for key, value in state.items()}


def snapshot(net, phase: str, config: Dict[str, Any], extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """In-memory checkpoint payload; tensors are detached CPU copies"""
    groups = {name: {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}
              for name, module in net.groups().items()}
    return {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'phase': phase,
        'config': config,
        'backbone_frozen': bool(net.backbone.frozen),
        'seg_head': net.head_cfg.model_dump(),
        'groups': groups,
        'shapes': {name: shape_manifest(state) for name, state in groups.items()},
        'extra': extra or {},
    }


def save_checkpoint(path: PathLike, net, phase: str, config: Dict[str, Any],
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write atomically: serialize to a sibling temp file, then rename over the target

    Args:
        path: Destination file
        net: DCDNet whose parameter groups are stored
        phase: Phase that produced the weights ('pretrain', 'train', 'finetune')
        config: Resolved run config as plain values
        extra: Optional JSON-like payload (metrics summary, domain id, ...)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = snapshot(net, phase, config, extra)
    tmp = path.with_name(path.name + '.tmp')
    torch.save(payload, tmp)
    os.replace(tmp, path)
    logger.info(f"Checkpoint saved: {path} (phase={phase}, groups={sorted(payload['groups'])})")
    return path


def load_checkpoint(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a DCDNet checkpoint")
    if payload.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def restore(net, payload: Dict[str, Any]):
    """Load every stored group into `net`, refusing on any shape mismatch"""
    if 'cam' in payload['groups'] and net.cam is None:
        net.attach_cam()
    targets = net.groups()
    for name, state in payload['groups'].items():
        if name not in targets:
            raise CheckpointError(f"checkpoint group '{name}' has no counterpart in this network")
        expected = shape_manifest(targets[name].state_dict())
        stored = payload['shapes'].get(name, shape_manifest(state))
        if expected != stored:
            mismatched = sorted(k for k in set(expected) | set(stored) if expected.get(k) != stored.get(k))
            raise CheckpointError(f"shape mismatch in group '{name}': {mismatched}")
        targets[name].load_state_dict(state)
    if payload.get('backbone_frozen'):
        net.backbone.freeze()
    logger.info(f"Checkpoint restored: phase={payload['phase']}, groups={sorted(payload['groups'])}")
    return net
