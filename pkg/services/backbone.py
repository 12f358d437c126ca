"""
Backbone Feature Extractor
Small hierarchical CNN with the low, high and base taps
"""

from dataclasses import dataclass

import torch
from torch import nn

from models import ModelConfig, ShapeError


class ConvBlock(nn.Sequential):
    """3x3 conv, instance norm, ReLU"""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False),
            nn.InstanceNorm2d(out_channels, affine=True),
            nn.ReLU(inplace=True),
        )


@dataclass
class BackboneFeatures:
    low: torch.Tensor    # B x C_shared x H/4 x W/4
    high: torch.Tensor   # B x C_private x H/8 x W/8
    base: torch.Tensor   # B x C_f x H/8 x W/8


class Backbone(nn.Module):
    """
    Three stages of two conv blocks. Stage 1 reaches H/4 through two
    stride-2 convs, stage 2 halves once more, stage 3 keeps H/8.
    Low tap after stage 1, high tap after stage 3, base = 1x1 projection of high.
    """

    def __init__(self, cfg: ModelConfig, image_size: int = 64):
        super().__init__()
        self.image_size = image_size
        mid = (cfg.c_shared + cfg.c_private) // 2
        self.stage1 = nn.Sequential(ConvBlock(3, cfg.c_shared, stride=2), ConvBlock(cfg.c_shared, cfg.c_shared, stride=2))
        self.stage2 = nn.Sequential(ConvBlock(cfg.c_shared, mid, stride=2), ConvBlock(mid, mid))
        self.stage3 = nn.Sequential(ConvBlock(mid, cfg.c_private), ConvBlock(cfg.c_private, cfg.c_private))
        self.base_proj = nn.Conv2d(cfg.c_private, cfg.c_f, 1)
        self.frozen = False

    def extract(self, images: torch.Tensor) -> BackboneFeatures:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3 or tuple(images.shape[-2:]) != (self.image_size, self.image_size):
            raise ShapeError(f"expected B x 3 x {self.image_size} x {self.image_size}, got {tuple(images.shape)}")
        low = self.stage1(images)
        high = self.stage3(self.stage2(low))
        return BackboneFeatures(low=low, high=high, base=self.base_proj(high))

    forward = extract

    def freeze(self):
        """Stop all parameter updates; calling it again is a no-op"""
        for param in self.parameters():
            param.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self

    def train(self, mode: bool = True):
        return super().train(mode and not self.frozen)
