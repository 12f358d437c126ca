"""
Runtime helpers
Seeding, device selection and parameter checksums
"""

import hashlib
import os
import random

import numpy as np
import torch


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def resolve_device(name: str = None) -> torch.device:
    name = name or os.getenv('DCDNET_DEVICE', 'cpu')
    if name.startswith('cuda') and not torch.cuda.is_available():
        return torch.device('cpu')
    return torch.device(name)


def parameter_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over the raw bytes of every parameter, in registration order"""
    digest = hashlib.sha256()
    for name, param in module.named_parameters():
        digest.update(name.encode())
        digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def derive_seed(*parts: int) -> int:
    """Stable 31-bit seed from a tuple of integers"""
    return int(np.random.SeedSequence([int(p) % (2 ** 32) for p in parts]).generate_state(1)[0] >> 1)
