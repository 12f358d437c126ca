"""
Prototype Segmentation Head
Simplified self-support matching (training phase), prototype-mask cyclic
refinement (fine-tuning/testing phase) and the mIoU metric
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from models import HeadConfig, ShapeError


@dataclass
class Prototype:
    fg: torch.Tensor   # B x C, unit norm
    bg: torch.Tensor


@dataclass
class Prediction:
    fg_score: torch.Tensor    # B x H x W in [0, 1]
    mask: torch.Tensor        # B x H x W bool, fg_score > threshold
    refined: torch.Tensor     # B bool, self-support/refinement step applied
    threshold: float = 0.5

    def masks(self) -> List[np.ndarray]:
        return [m.cpu().numpy().astype(np.uint8) for m in self.mask]


def downsample_mask(mask: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Area-average to `size`, then re-binarize at 0.5"""
    if mask.dim() == 2:
        mask = mask.unsqueeze(0)
    area = F.interpolate(mask.unsqueeze(1).float(), size=size, mode='area').squeeze(1)
    return (area >= 0.5).float()


def _pool(feat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked mean at feature resolution; empty masks fall back to the global mean"""
    mask = mask.float()
    count = mask.sum(dim=(1, 2))
    pooled = (feat * mask.unsqueeze(1)).sum(dim=(2, 3)) / count.clamp(min=1.0).unsqueeze(1)
    pooled = torch.where((count > 0).unsqueeze(1), pooled, feat.mean(dim=(2, 3)))
    return F.normalize(pooled, dim=1)


def masked_average_pool(feat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    Unit-normalized prototype of the masked region

    Args:
        feat: B x C x h x w (or C x h x w)
        mask: B x H x W (or H x W) binary mask at any resolution
    """
    squeeze = feat.dim() == 3
    if squeeze:
        feat = feat.unsqueeze(0)
    pooled = _pool(feat, downsample_mask(mask, tuple(feat.shape[-2:])))
    return pooled[0] if squeeze else pooled


def support_prototypes(support_feats: torch.Tensor, support_masks: torch.Tensor) -> Prototype:
    """Average of per-shot fg/bg prototypes, renormalized; supports are B x K x C x h x w"""
    if support_feats.dim() != 5 or support_masks.dim() != 4:
        raise ShapeError("support features must be B x K x C x h x w and masks B x K x H x W")
    b, k = support_feats.shape[:2]
    feats = support_feats.flatten(0, 1)
    masks = support_masks.flatten(0, 1)
    fg = masked_average_pool(feats, masks).view(b, k, -1).mean(dim=1)
    bg = masked_average_pool(feats, 1 - masks).view(b, k, -1).mean(dim=1)
    return Prototype(fg=F.normalize(fg, dim=1), bg=F.normalize(bg, dim=1))


def score(query_feat: torch.Tensor, proto: Prototype, temperature: float) -> torch.Tensor:
    """Foreground probability of a 2-way softmax over cosine similarities / T"""
    sim_fg = F.cosine_similarity(query_feat, proto.fg[:, :, None, None], dim=1)
    sim_bg = F.cosine_similarity(query_feat, proto.bg[:, :, None, None], dim=1)
    return torch.softmax(torch.stack([sim_bg, sim_fg], dim=1) / temperature, dim=1)[:, 1]


def _finish(low_score: torch.Tensor, out_size: Tuple[int, int], refined: torch.Tensor,
            threshold: float) -> Prediction:
    fg_score = F.interpolate(low_score.unsqueeze(1), size=out_size, mode='bilinear', align_corners=False).squeeze(1)
    fg_score = fg_score.clamp(0.0, 1.0)
    return Prediction(fg_score=fg_score, mask=fg_score > threshold, refined=refined, threshold=threshold)


def ssp_predict(support_feats: torch.Tensor, support_masks: torch.Tensor, query_feat: torch.Tensor,
                cfg: HeadConfig, out_size: Optional[Tuple[int, int]] = None) -> Prediction:
    """
    Support prototypes, cosine scoring, then one self-support round: confident
    query pixels give query prototypes blended with the support ones.
    """
    out_size = out_size or tuple(support_masks.shape[-2:])
    proto = support_prototypes(support_feats, support_masks)
    first = score(query_feat, proto, cfg.temperature)

    fg_conf = (first > cfg.fg_confidence).detach()
    bg_conf = (first < cfg.bg_confidence).detach()
    has_fg = fg_conf.flatten(1).any(dim=1)
    has_bg = bg_conf.flatten(1).any(dim=1)
    refined = has_fg | has_bg

    self_fg = _pool(query_feat, fg_conf)
    self_bg = _pool(query_feat, bg_conf)
    fg = torch.where(has_fg[:, None], cfg.blend * proto.fg + (1 - cfg.blend) * self_fg, proto.fg)
    bg = torch.where(has_bg[:, None], cfg.blend * proto.bg + (1 - cfg.blend) * self_bg, proto.bg)
    second = score(query_feat, Prototype(fg=F.normalize(fg, dim=1), bg=F.normalize(bg, dim=1)), cfg.temperature)
    second = torch.where(refined[:, None, None], second, first)
    return _finish(second, out_size, refined, cfg.threshold)


def bfp_predict(support_feats: torch.Tensor, support_masks: torch.Tensor, query_feat: torch.Tensor,
                cfg: HeadConfig, rounds: Optional[int] = None, out_size: Optional[Tuple[int, int]] = None,
                self_support: bool = True) -> Prediction:
    """
    Prototype-mask cyclic refinement: each round pools query prototypes from the
    current mask and fuses them with the support prototypes before re-scoring.
    """
    rounds = cfg.bfp_rounds if rounds is None else rounds
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    out_size = out_size or tuple(support_masks.shape[-2:])
    proto = support_prototypes(support_feats, support_masks)
    current = score(query_feat, proto, cfg.temperature)
    b = current.shape[0]
    if not self_support:
        return _finish(current, out_size, torch.zeros(b, dtype=torch.bool, device=current.device), cfg.threshold)

    for _ in range(rounds):
        flat = current.detach().flatten(1)
        mask = flat > cfg.threshold
        degenerate = mask.all(dim=1) | (~mask).all(dim=1)
        if degenerate.any():
            median = flat.median(dim=1, keepdim=True).values
            mask = torch.where(degenerate[:, None], flat > median, mask)
        mask = mask.view_as(current)
        fg = F.normalize(proto.fg + _pool(query_feat, mask), dim=1)
        bg = F.normalize(proto.bg + _pool(query_feat, ~mask), dim=1)
        current = score(query_feat, Prototype(fg=fg, bg=bg), cfg.temperature)
    return _finish(current, out_size, torch.ones(b, dtype=torch.bool, device=current.device), cfg.threshold)


# =============================================================================
# METRIC
# =============================================================================

MaskLike = Union[np.ndarray, torch.Tensor]


def _as_masks(items: Sequence[Union[Prediction, MaskLike]]) -> List[np.ndarray]:
    masks = []
    for item in items:
        if isinstance(item, Prediction):
            masks.extend(m.astype(bool) for m in item.masks())
        elif isinstance(item, torch.Tensor):
            masks.append(item.detach().cpu().numpy() > 0)
        else:
            masks.append(np.asarray(item) > 0)
    return masks


def intersection_union(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """[[fg_inter, fg_union], [bg_inter, bg_union]] pixel counts"""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return np.array([
        [np.sum(pred & gt), np.sum(pred | gt)],
        [np.sum(~pred & ~gt), np.sum(~pred | ~gt)],
    ], dtype=np.int64)


def _ratio(inter: int, union: int) -> float:
    return float(inter) / float(union) if union > 0 else 1.0


def episode_iou(pred: MaskLike, gt: MaskLike) -> Tuple[float, float]:
    (pred,), (gt,) = _as_masks([pred]), _as_masks([gt])
    counts = intersection_union(pred, gt)
    return _ratio(*counts[0]), _ratio(*counts[1])


def miou(preds: Sequence[Union[Prediction, MaskLike]], gts: Sequence[MaskLike], fg_only: bool = False) -> float:
    """
    Per-class IoU from intersections and unions summed over all episodes,
    averaged over foreground and background (or foreground only)
    """
    preds, gts = _as_masks(preds), _as_masks(gts)
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground truths")
    totals = np.zeros((2, 2), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        totals += intersection_union(pred, gt)
    fg_iou, bg_iou = _ratio(*totals[0]), _ratio(*totals[1])
    return fg_iou if fg_only else (fg_iou + bg_iou) / 2.0
