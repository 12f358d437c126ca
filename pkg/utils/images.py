"""
Image file utilities
8-bit portable image export/import for scenes, masks and debug dumps
"""

from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

PathLike = Union[str, Path]


def save_image(image: np.ndarray, path: PathLike):
    """Write a 3 x H x W float image in [0, 1] as an 8-bit file (PPM/PNG by extension)"""
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(np.transpose(pixels, (1, 2, 0)), mode='RGB').save(path)


def save_mask(mask: np.ndarray, path: PathLike):
    """Write a binary H x W mask as an 8-bit 0/255 grayscale file"""
    pixels = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(pixels, mode='L').save(path)


def save_gray(values: np.ndarray, path: PathLike):
    """Write an H x W map in [0, 1] as an 8-bit grayscale file"""
    pixels = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels, mode='L').save(path)


def load_image(path: PathLike) -> np.ndarray:
    with Image.open(path) as img:
        pixels = np.asarray(img.convert('RGB'), dtype=np.float32) / 255.0
    return np.ascontiguousarray(np.transpose(pixels, (2, 0, 1)))


def load_mask(path: PathLike) -> np.ndarray:
    with Image.open(path) as img:
        return (np.asarray(img.convert('L')) > 127).astype(np.uint8)


def save_fusion_weights(weights, directory: PathLike, prefix: str = 'fusion'):
    """
    Dump the three fusion weight maps of the first batch row as grayscale PNGs

    Args:
        weights: FusionWeights with w_b, w_s, w_p tensors of shape B x 1 x H x W
        directory: Output directory (created if missing)
        prefix: File name prefix

    Returns:
        List of written paths
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in ('w_b', 'w_s', 'w_p'):
        grid = getattr(weights, name)[0, 0].detach().cpu().numpy()
        path = directory / f"{prefix}_{name}.png"
        save_gray(grid, path)
        written.append(path)
    return written
