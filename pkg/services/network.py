"""
DCDNet Assembly
Wires backbone, decomposition, fusion, modulation and the prototype head,
with the ablation switches deciding which parts take part in the forward pass
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import torch
from torch import nn

from models import AblationSwitches, HeadConfig, ModelConfig, RunConfig
from services.acfd import DecomposedFeatures, Discriminator, FeatureDecomposer, MemoryBank, ProjectionHead
from services.backbone import Backbone
from services.cam import CrossAdaptiveModulation
from services.data_synth import EpisodeBatch
from services.mgdf import FusionWeights, MatrixGuidedFusion
from services.seg_head import Prediction, bfp_predict, ssp_predict

logger = logging.getLogger(__name__)

PHASES = ('train', 'finetune', 'test')
RMS_EPS = 1e-6


@dataclass
class FeaturePass:
    """Features handed to the head, plus the decomposition they came from"""
    features: torch.Tensor
    decomposed: Optional[DecomposedFeatures] = None
    weights: Optional[FusionWeights] = None


@dataclass
class NetworkOutput:
    prediction: Prediction
    support: FeaturePass
    query: FeaturePass


def balance_scales(f: DecomposedFeatures, eps: float = RMS_EPS) -> DecomposedFeatures:
    """Base, shared and private each divided by its per-sample root-mean-square"""
    def unit_rms(x: torch.Tensor) -> torch.Tensor:
        return x / x.pow(2).mean(dim=(1, 2, 3), keepdim=True).sqrt().clamp(min=eps)
    return DecomposedFeatures(base=unit_rms(f.base), shared=unit_rms(f.shared), private=unit_rms(f.private))


class DCDNet(nn.Module):
    """
    Training phase: SSP head, no modulation.
    Fine-tuning and testing: BFP head, private features modulated by CAM once attached.
    """

    def __init__(self, cfg: RunConfig):
        super().__init__()
        model_cfg = cfg.section(ModelConfig)
        self.model_cfg = model_cfg
        self.head_cfg: HeadConfig = cfg.section(HeadConfig)
        self.switches: AblationSwitches = cfg.section(AblationSwitches)
        self.backbone = Backbone(model_cfg, cfg.image_size)
        self.decomposer = FeatureDecomposer(model_cfg)
        self.fusion = MatrixGuidedFusion(model_cfg.c_f)
        self.projection_head = ProjectionHead(model_cfg.c_f, model_cfg.d_proj)
        n_classes = cfg.n_source_classes if model_cfg.disc_class_head else 0
        self.discriminator = Discriminator(model_cfg.c_f, model_cfg.disc_hidden, n_classes)
        self.cam: Optional[CrossAdaptiveModulation] = None
        self.bank = MemoryBank(model_cfg.d_proj, model_cfg.bank_capacity)
        self.phase = 'train'

    # -------------------------------------------------------------------------
    # Phase and parameter groups
    # -------------------------------------------------------------------------

    def set_phase(self, phase: str) -> 'DCDNet':
        if phase not in PHASES:
            raise ValueError(f"unknown phase '{phase}', expected one of {PHASES}")
        self.phase = phase
        return self

    def attach_cam(self) -> CrossAdaptiveModulation:
        """Fresh modulation block, identity at initialization"""
        device = next(self.fusion.parameters()).device
        self.cam = CrossAdaptiveModulation(self.model_cfg.c_f).to(device)
        return self.cam

    def groups(self) -> Dict[str, nn.Module]:
        groups = {
            'backbone': self.backbone,
            'shared_branch': self.decomposer.shared_branch,
            'private_branch': self.decomposer.private_branch,
            'projection_head': self.projection_head,
            'discriminator': self.discriminator,
            'mgdf': self.fusion,
        }
        if self.cam is not None:
            groups['cam'] = self.cam
        return groups

    def main_parameters(self):
        """Everything the segmentation objective updates; the discriminator is excluded"""
        modules = [self.decomposer, self.fusion, self.projection_head]
        if self.cam is not None:
            modules.append(self.cam)
        return [p for m in modules for p in m.parameters() if p.requires_grad]

    # -------------------------------------------------------------------------
    # Forward
    # -------------------------------------------------------------------------

    @property
    def modulating(self) -> bool:
        return self.cam is not None and self.switches.use_cam and self.phase != 'train'

    def decompose(self, images: torch.Tensor) -> DecomposedFeatures:
        decomposed = self.decomposer(self.backbone(images))
        if self.modulating:
            decomposed = decomposed.replace(private=self.cam(decomposed.shared, decomposed.private))
        return decomposed

    def features(self, images: torch.Tensor) -> FeaturePass:
        sw = self.switches
        if not sw.decomposed:
            return FeaturePass(features=self.backbone(images).base)
        decomposed = self.decompose(images)
        if not sw.use_mgdf:
            return FeaturePass(features=decomposed.base, decomposed=decomposed)
        enabled = (sw.use_base, sw.use_shared, sw.use_private)
        inputs = balance_scales(decomposed) if self.model_cfg.fusion_balance else decomposed
        fused, weights = self.fusion.fuse_with_weights(inputs, enabled=enabled)
        return FeaturePass(features=fused, decomposed=decomposed, weights=weights)

    def forward(self, batch: EpisodeBatch, head: Optional[str] = None) -> NetworkOutput:
        b, k = batch.support_images.shape[:2]
        support = self.features(batch.support_images.flatten(0, 1))
        query = self.features(batch.query_images)
        support_feats = support.features.view(b, k, *support.features.shape[1:])
        out_size = tuple(batch.query_images.shape[-2:])

        head = head or ('ssp' if self.phase == 'train' else 'bfp')
        if head == 'ssp':
            prediction = ssp_predict(support_feats, batch.support_masks, query.features, self.head_cfg, out_size)
        elif head == 'bfp':
            prediction = bfp_predict(support_feats, batch.support_masks, query.features, self.head_cfg,
                                     out_size=out_size)
        else:
            raise ValueError(f"unknown head '{head}'")
        return NetworkOutput(prediction=prediction, support=support, query=query)

    def predict(self, batch: EpisodeBatch, head: Optional[str] = None) -> Prediction:
        return self.forward(batch, head).prediction


def build_network(cfg: RunConfig, device: Optional[torch.device] = None) -> DCDNet:
    net = DCDNet(cfg)
    if device is not None:
        net = net.to(device)
    logger.info(f"DCDNet built: {sum(p.numel() for p in net.parameters())} parameters, "
                f"switches={net.switches.model_dump()}")
    return net
