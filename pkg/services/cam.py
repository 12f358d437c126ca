"""
Cross-Adaptive Modulation
Shared features generate (gamma, beta) that modulate private features
during fine-tuning and testing
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from models import ShapeError


@dataclass
class ModulationParams:
    gamma: torch.Tensor   # B x C_f x H' x W', in [-1, 1]
    beta: torch.Tensor


def modulate(private: torch.Tensor, params: ModulationParams) -> torch.Tensor:
    """P^m = P * (1 + gamma) + beta"""
    if private.shape != params.gamma.shape or private.shape != params.beta.shape:
        raise ShapeError(f"private {tuple(private.shape)} does not match modulation {tuple(params.gamma.shape)}")
    return private * (1 + params.gamma) + params.beta


class CrossAdaptiveModulation(nn.Module):
    """
    Interaction conv over [S; P], then a 1x1 conv to 2 * C_f channels and tanh.
    The generator conv starts at zero so gamma = beta = 0 and modulation is the identity.
    """

    def __init__(self, c_f: int):
        super().__init__()
        self.c_f = c_f
        self.interact_conv = nn.Conv2d(2 * c_f, c_f, 3, padding=1)
        self.param_conv = nn.Conv2d(c_f, 2 * c_f, 1)
        nn.init.zeros_(self.param_conv.weight)
        nn.init.zeros_(self.param_conv.bias)

    def interact(self, shared: torch.Tensor, private: torch.Tensor) -> torch.Tensor:
        """F^a = ReLU(Conv3x3([S; P]))"""
        if shared.shape != private.shape:
            raise ShapeError(f"shared {tuple(shared.shape)} and private {tuple(private.shape)} differ")
        return F.relu(self.interact_conv(torch.cat([shared, private], dim=1)))

    def gen_params(self, f_a: torch.Tensor) -> ModulationParams:
        gamma, beta = torch.tanh(self.param_conv(f_a)).split(self.c_f, dim=1)
        return ModulationParams(gamma=gamma, beta=beta)

    def forward(self, shared: torch.Tensor, private: torch.Tensor) -> torch.Tensor:
        return modulate(private, self.gen_params(self.interact(shared, private)))
