"""
Adversarial-Contrastive Feature Decomposition
Shared (domain-relevant) and private (category-relevant) branches over the
backbone taps, with the adversarial, contrastive and orthogonality objectives
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from models import EmptyBatchError, GrlConfig, ModelConfig, ShapeError
from services.backbone import BackboneFeatures, ConvBlock

ADV_EPS = 1e-7
ORTHO_EPS = 1e-8
BACKGROUND_LABEL = -1


@dataclass
class DecomposedFeatures:
    shared: torch.Tensor    # B x C_f x H' x W'
    private: torch.Tensor   # B x C_f x H' x W'
    base: torch.Tensor      # B x C_f x H' x W'

    def replace(self, **changes) -> 'DecomposedFeatures':
        values = {'shared': self.shared, 'private': self.private, 'base': self.base}
        values.update(changes)
        return DecomposedFeatures(**values)


# =============================================================================
# ATTENTION
# =============================================================================

class SpatialAttention(nn.Module):
    """Per-position gate from channel-wise mean and max maps"""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class ChannelAttention(nn.Module):
    """Per-channel gate from global average and max pooling through a shared bottleneck"""

    def __init__(self, channels: int, ratio: int = 8):
        super().__init__()
        hidden = max(channels // ratio, 1)
        self.fc = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        avg = self.fc(F.adaptive_avg_pool2d(x, 1))
        peak = self.fc(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + peak)


def spatial_attention(x: torch.Tensor, module: SpatialAttention) -> torch.Tensor:
    return module(x)


def channel_attention(x: torch.Tensor, module: ChannelAttention) -> torch.Tensor:
    return module(x)


# =============================================================================
# BRANCHES
# =============================================================================

class SharedBranch(nn.Module):
    """S = Proj(resize(SA(F^l) * Conv(Conv(F^l))))"""

    def __init__(self, c_shared: int, c_f: int):
        super().__init__()
        self.c_shared = c_shared
        self.blocks = nn.Sequential(ConvBlock(c_shared, c_shared), ConvBlock(c_shared, c_shared))
        self.attention = SpatialAttention()
        self.proj = nn.Conv2d(c_shared, c_f, 1)

    def gated(self, low: torch.Tensor) -> torch.Tensor:
        if low.shape[1] != self.c_shared:
            raise ShapeError(f"shared branch expects {self.c_shared} channels, got {low.shape[1]}")
        return spatial_attention(low, self.attention) * self.blocks(low)

    def forward(self, low: torch.Tensor, out_size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
        if out_size is None:
            out_size = (low.shape[-2] // 2, low.shape[-1] // 2)
        gated = F.interpolate(self.gated(low), size=out_size, mode='bilinear', align_corners=False)
        return self.proj(gated)


class PrivateBranch(nn.Module):
    """P = Proj(CA(F^h) * Conv(Conv(F^h)))"""

    def __init__(self, c_private: int, c_f: int):
        super().__init__()
        self.c_private = c_private
        self.blocks = nn.Sequential(ConvBlock(c_private, c_private), ConvBlock(c_private, c_private))
        self.attention = ChannelAttention(c_private)
        self.proj = nn.Conv2d(c_private, c_f, 1)

    def gated(self, high: torch.Tensor) -> torch.Tensor:
        if high.shape[1] != self.c_private:
            raise ShapeError(f"private branch expects {self.c_private} channels, got {high.shape[1]}")
        return channel_attention(high, self.attention) * self.blocks(high)

    def forward(self, high: torch.Tensor) -> torch.Tensor:
        return self.proj(self.gated(high))


def shared_branch(low: torch.Tensor, branch: SharedBranch, out_size: Tuple[int, int]) -> torch.Tensor:
    return branch(low, out_size)


def private_branch(high: torch.Tensor, branch: PrivateBranch) -> torch.Tensor:
    return branch(high)


class FeatureDecomposer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.shared_branch = SharedBranch(cfg.c_shared, cfg.c_f)
        self.private_branch = PrivateBranch(cfg.c_private, cfg.c_f)

    def forward(self, features: BackboneFeatures) -> DecomposedFeatures:
        if features.low.shape[-2] != 2 * features.high.shape[-2]:
            raise ShapeError("low tap must have twice the resolution of the high tap")
        shared = shared_branch(features.low, self.shared_branch, tuple(features.high.shape[-2:]))
        private = private_branch(features.high, self.private_branch)
        return DecomposedFeatures(shared=shared, private=private, base=features.base)


# =============================================================================
# GRADIENT REVERSAL AND DISCRIMINATOR
# =============================================================================

class _ReverseGradient(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.coeff, None


def grl_forward(x: torch.Tensor, cfg: GrlConfig) -> torch.Tensor:
    """Identity forward; backward multiplies the incoming gradient by -lambda_grl"""
    return _ReverseGradient.apply(x, float(cfg.lambda_grl))


def grl_schedule(iteration: int, total: int, lambda_grl: float, warmup_frac: float) -> GrlConfig:
    """Linear warm-up of the reversal strength over the first warmup_frac of training"""
    warmup = warmup_frac * total
    if warmup <= 0:
        return GrlConfig(lambda_grl=lambda_grl)
    return GrlConfig(lambda_grl=lambda_grl * min(1.0, iteration / warmup))


class Discriminator(nn.Module):
    """
    GAP followed by a 2-layer perceptron. Logit 0 is the real/pseudo domain
    logit; optional extra logits classify source categories.
    """

    def __init__(self, c_f: int, hidden: int = 64, n_classes: int = 0):
        super().__init__()
        self.n_targets = 1 + n_classes
        self.mlp = nn.Sequential(nn.Linear(c_f, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, self.n_targets))

    def forward(self, shared: torch.Tensor) -> torch.Tensor:
        return self.mlp(shared.mean(dim=(-2, -1)))


def discriminate(shared: torch.Tensor, disc: Discriminator) -> torch.Tensor:
    return disc(shared)


def adversarial_loss_from_probs(p_src: torch.Tensor, p_tgt: torch.Tensor, eps: float = ADV_EPS) -> torch.Tensor:
    """mean[log D(src) + log(1 - D(tgt))] with D clamped to [eps, 1 - eps]"""
    if p_src.numel() == 0 or p_tgt.numel() == 0:
        raise EmptyBatchError("adversarial loss needs nonempty source and pseudo-target batches")
    p_src = p_src.clamp(eps, 1 - eps)
    p_tgt = p_tgt.clamp(eps, 1 - eps)
    return torch.log(p_src).mean() + torch.log(1 - p_tgt).mean()


def adversarial_loss(shared_src: torch.Tensor, shared_pseudo_tgt: torch.Tensor, disc: Discriminator,
                     grl: GrlConfig) -> torch.Tensor:
    if shared_src.shape[0] == 0 or shared_pseudo_tgt.shape[0] == 0:
        raise EmptyBatchError("adversarial loss needs nonempty source and pseudo-target batches")
    p_src = torch.sigmoid(discriminate(grl_forward(shared_src, grl), disc)[:, 0])
    p_tgt = torch.sigmoid(discriminate(grl_forward(shared_pseudo_tgt, grl), disc)[:, 0])
    return adversarial_loss_from_probs(p_src, p_tgt)


# =============================================================================
# CONTRASTIVE
# =============================================================================

class ProjectionHead(nn.Module):
    """Pixel-wise MLP to unit vectors of dimension d_proj"""

    def __init__(self, c_f: int, d_proj: int):
        super().__init__()
        self.net = nn.Sequential(nn.Conv2d(c_f, c_f, 1), nn.ReLU(inplace=True), nn.Conv2d(c_f, d_proj, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(x), dim=1)


class MemoryBank:
    """FIFO ring buffer of unit-norm pixel embeddings with their class labels"""

    def __init__(self, dim: int, capacity: int):
        self.dim = dim
        self.capacity = capacity
        self.embeddings = torch.zeros(capacity, dim)
        self.labels = torch.zeros(capacity, dtype=torch.long)
        self.ptr = 0
        self.size = 0

    def enqueue(self, embeddings: torch.Tensor, labels: torch.Tensor):
        embeddings = F.normalize(embeddings.detach().float().cpu(), dim=1)
        labels = labels.detach().cpu().long()
        if embeddings.shape[0] > self.capacity:
            embeddings, labels = embeddings[-self.capacity:], labels[-self.capacity:]
        n = embeddings.shape[0]
        idx = (self.ptr + torch.arange(n)) % self.capacity
        self.embeddings[idx] = embeddings
        self.labels[idx] = labels
        self.ptr = int((self.ptr + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)

    def contents(self, device=None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Stored entries, oldest first"""
        if self.size < self.capacity:
            order = torch.arange(self.size)
        else:
            order = (self.ptr + torch.arange(self.capacity)) % self.capacity
        return self.embeddings[order].to(device), self.labels[order].to(device)

    def state_dict(self) -> Dict[str, torch.Tensor]:
        return {'embeddings': self.embeddings.clone(), 'labels': self.labels.clone(),
                'ptr': torch.tensor(self.ptr), 'size': torch.tensor(self.size)}


@dataclass
class ContrastiveResult:
    loss: torch.Tensor
    no_pair: bool = False
    pixels: int = 0
    diagnostics: Dict[str, float] = field(default_factory=dict)


def contrastive_terms(pos_sim: torch.Tensor, neg_sims: torch.Tensor, neg_valid: torch.Tensor,
                      tau: float) -> torch.Tensor:
    """
    Per-anchor -log(exp(pos/tau) / (exp(pos/tau) + sum_j exp(neg_j/tau)))

    Args:
        pos_sim: N similarities to the positive
        neg_sims: N x M similarities to candidate negatives
        neg_valid: N x M mask of which candidates are negatives of each anchor
    """
    logits = torch.cat([pos_sim[:, None], neg_sims.masked_fill(~neg_valid, float('-inf'))], dim=1) / tau
    return torch.logsumexp(logits, dim=1) - pos_sim / tau


def _sample_pixels(labels: torch.Tensor, per_class: int) -> torch.Tensor:
    """Up to per_class random foreground and background pixel indices of one image"""
    picks = []
    for wanted in (True, False):
        idx = torch.nonzero(labels == wanted, as_tuple=False).flatten()
        if idx.numel() > per_class:
            idx = idx[torch.randperm(idx.numel(), device=idx.device)[:per_class]]
        picks.append(idx)
    return torch.cat(picks)


def contrastive_loss(private: torch.Tensor, masks: torch.Tensor, class_ids: torch.Tensor, bank: MemoryBank,
                     proj: ProjectionHead, tau: float, pixels_per_class: int = 64,
                     enqueue_cap: int = 128) -> ContrastiveResult:
    """
    Pixel-level supervised InfoNCE over private features, negatives from the bank

    Args:
        private: B x C_f x h x w private features
        masks: B x H x W binary masks at image resolution
        class_ids: B foreground class ids; background pixels use BACKGROUND_LABEL
        bank: Memory bank, enqueued with a capped subset of fresh embeddings afterwards
        proj: Projection head to unit vectors
        tau: Temperature > 0
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    b, _, h, w = private.shape
    z = proj(private).flatten(2).transpose(1, 2)                       # B x hw x d
    fg = F.interpolate(masks.unsqueeze(1).float(), size=(h, w), mode='area').flatten(1) > 0.5

    anchors, labels = [], []
    for i in range(b):
        idx = _sample_pixels(fg[i], pixels_per_class)
        anchors.append(z[i, idx])
        labels.append(torch.where(fg[i, idx], class_ids[i].expand(idx.numel()),
                                  torch.full_like(idx, BACKGROUND_LABEL)))
    anchors, labels = torch.cat(anchors), torch.cat(labels)
    if anchors.shape[0] == 0:
        return ContrastiveResult(loss=private.sum() * 0.0, no_pair=True)

    bank_z, bank_labels = bank.contents(private.device)
    n = anchors.shape[0]

    # In-batch positive: next anchor with the same label (cyclic); bank fallback: newest same-label entry
    pos_index = torch.full((n,), -1, dtype=torch.long, device=anchors.device)
    for label in labels.unique():
        members = torch.nonzero(labels == label, as_tuple=False).flatten()
        if members.numel() > 1:
            pos_index[members] = members.roll(-1)
    pos_sim = torch.zeros(n, device=anchors.device)
    has_pos = pos_index >= 0
    pos_sim[has_pos] = (anchors[has_pos] * anchors[pos_index[has_pos]]).sum(dim=1)

    if bank_z.shape[0] > 0:
        sims = anchors @ bank_z.T                                       # n x M
        same = labels[:, None] == bank_labels[None, :]
        fallback = ~has_pos & same.any(dim=1)
        if fallback.any():
            newest = same.float().mul(torch.arange(1, bank_z.shape[0] + 1, device=anchors.device)).argmax(dim=1)
            pos_sim = torch.where(fallback, sims.gather(1, newest[:, None]).squeeze(1), pos_sim)
            has_pos = has_pos | fallback
        neg_valid = ~same
    else:
        sims = anchors.new_zeros(n, 0)
        neg_valid = torch.zeros(n, 0, dtype=torch.bool, device=anchors.device)

    if not has_pos.any():
        result = ContrastiveResult(loss=private.sum() * 0.0, no_pair=True, pixels=0)
    else:
        terms = contrastive_terms(pos_sim[has_pos], sims[has_pos], neg_valid[has_pos], tau)
        result = ContrastiveResult(loss=terms.mean(), pixels=int(has_pos.sum()),
                                   diagnostics={'skipped': float((~has_pos).sum())})

    keep = torch.randperm(n, device=anchors.device)[:enqueue_cap]
    bank.enqueue(anchors[keep], labels[keep])
    return result


# =============================================================================
# ORTHOGONALITY
# =============================================================================

def orthogonality_loss(shared: torch.Tensor, private: torch.Tensor, eps: float = ORTHO_EPS) -> torch.Tensor:
    """(1/B) sum_b ||S_b^T P_b||_F^2 / (||S_b||_F ||P_b||_F), zero-norm samples contribute 0"""
    if shared.shape != private.shape:
        raise ShapeError(f"shared {tuple(shared.shape)} and private {tuple(private.shape)} differ")
    s = shared.flatten(2).transpose(1, 2)    # B x HW x C
    p = private.flatten(2).transpose(1, 2)
    cross = torch.linalg.matrix_norm(s.transpose(1, 2) @ p) ** 2
    denom = torch.linalg.matrix_norm(s) * torch.linalg.matrix_norm(p)
    valid = denom > eps
    per_sample = torch.where(valid, cross / denom.clamp(min=eps), torch.zeros_like(cross))
    return per_sample.mean()


def _unit_frobenius(x: torch.Tensor, eps: float) -> torch.Tensor:
    norms = x.flatten(1).norm(dim=1).clamp(min=eps)
    return x / norms.view(-1, *([1] * (x.dim() - 1)))


def scale_free_orthogonality_loss(shared: torch.Tensor, private: torch.Tensor,
                                  eps: float = ORTHO_EPS) -> torch.Tensor:
    """
    orthogonality_loss on per-sample Frobenius-normalized S_b and P_b, i.e.
    (1/B) sum_b ||S_b^T P_b||_F^2 / (||S_b||_F^2 ||P_b||_F^2). Lies in [0, 1] and is
    unchanged by rescaling either feature, so it can only be lowered by decorrelating.
    """
    if shared.shape != private.shape:
        raise ShapeError(f"shared {tuple(shared.shape)} and private {tuple(private.shape)} differ")
    return orthogonality_loss(_unit_frobenius(shared, eps), _unit_frobenius(private, eps), eps)


def channel_correlation(shared: torch.Tensor, private: torch.Tensor) -> float:
    """Mean absolute Pearson correlation between matching channels of S and P over pixels"""
    s = shared.detach().transpose(0, 1).flatten(1)
    p = private.detach().transpose(0, 1).flatten(1)
    s = s - s.mean(dim=1, keepdim=True)
    p = p - p.mean(dim=1, keepdim=True)
    corr = (s * p).sum(dim=1) / (s.norm(dim=1) * p.norm(dim=1)).clamp(min=1e-12)
    value = corr.abs().mean().item()
    return 0.0 if math.isnan(value) else value
