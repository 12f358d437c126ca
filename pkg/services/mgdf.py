"""
Matrix-Guided Dynamic Fusion
Spatial 3-way softmax weighting of base, shared and private features
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import nn

from models import ShapeError
from services.acfd import DecomposedFeatures


@dataclass
class FusionWeights:
    w_b: torch.Tensor   # B x 1 x H' x W'
    w_s: torch.Tensor
    w_p: torch.Tensor

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.w_b, self.w_s, self.w_p], dim=1)


class MatrixGuidedFusion(nn.Module):
    def __init__(self, c_f: int):
        super().__init__()
        self.c_f = c_f
        self.reduce = nn.Conv2d(3 * c_f, c_f, 1)
        self.weight_conv = nn.Conv2d(c_f, 3, 3, padding=1)
        self.enhance = nn.Conv2d(c_f, c_f, 1)

    def _check(self, f: DecomposedFeatures):
        shapes = {tuple(f.base.shape), tuple(f.shared.shape), tuple(f.private.shape)}
        if len(shapes) != 1:
            raise ShapeError(f"base/shared/private shapes differ: {sorted(shapes)}")
        if f.base.shape[1] != self.c_f:
            raise ShapeError(f"fusion expects {self.c_f} channels, got {f.base.shape[1]}")

    def fuse_concat(self, f: DecomposedFeatures) -> torch.Tensor:
        """F^c = Conv1x1([F^b; S; P])"""
        self._check(f)
        return self.reduce(torch.cat([f.base, f.shared, f.private], dim=1))

    def fusion_logits(self, f_c: torch.Tensor) -> torch.Tensor:
        return self.weight_conv(f_c)

    def fusion_weights(self, f_c: torch.Tensor,
                       enabled: Tuple[bool, bool, bool] = (True, True, True)) -> FusionWeights:
        """Softmax over the 3-channel conv output; disabled inputs get weight 0"""
        logits = self.fusion_logits(f_c)
        if not all(enabled):
            off = torch.tensor([not flag for flag in enabled], device=logits.device).view(1, 3, 1, 1)
            logits = logits.masked_fill(off, float('-inf'))
        weights = torch.softmax(logits, dim=1)
        w_b, w_s, w_p = weights.split(1, dim=1)
        return FusionWeights(w_b=w_b, w_s=w_s, w_p=w_p)

    def enhancement(self, f_c: torch.Tensor) -> torch.Tensor:
        """G(x) = x + Conv1x1(x)"""
        return f_c + self.enhance(f_c)

    def forward(self, f: DecomposedFeatures, weights: Optional[FusionWeights] = None,
                enabled: Tuple[bool, bool, bool] = (True, True, True)) -> torch.Tensor:
        """F^f = w_p * P + w_s * S + w_b * F^b + G(F^c)"""
        return self.fuse_with_weights(f, weights, enabled)[0]

    fuse = forward

    def fuse_with_weights(self, f: DecomposedFeatures, weights: Optional[FusionWeights] = None,
                          enabled: Tuple[bool, bool, bool] = (True, True, True)
                          ) -> Tuple[torch.Tensor, FusionWeights]:
        if not all(enabled):
            zero = torch.zeros_like(f.base)
            f = DecomposedFeatures(
                base=f.base if enabled[0] else zero,
                shared=f.shared if enabled[1] else zero,
                private=f.private if enabled[2] else zero,
            )
        f_c = self.fuse_concat(f)
        if weights is None:
            weights = self.fusion_weights(f_c, enabled)
        fused = weights.w_p * f.private + weights.w_s * f.shared + weights.w_b * f.base + self.enhancement(f_c)
        return fused, weights
