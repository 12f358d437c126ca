"""
Training Pipeline
Baseline pretraining, alternating DCDNet source training, support-only
target fine-tuning and episode evaluation
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import pandas as pd
import torch
import torch.nn.functional as F

from models import DomainSpec, EmptyBatchError, NumericalAbort, RunConfig, TrainConfig
from services.acfd import (
    Discriminator, adversarial_loss, channel_correlation, contrastive_loss, discriminate,
    grl_schedule, orthogonality_loss, scale_free_orthogonality_loss
)
from services.data_synth import (
    PHASE_CODES, Episode, EpisodeBatch, EpisodeSource, QueryMaskGuard, SupportSet,
    augment_support, collate, episode_seeds, make_pseudo_target
)
from services.network import DCDNet, build_network
from services.seg_head import Prediction, episode_iou, miou, ssp_predict
from utils.checkpoint import restore, save_checkpoint
from utils.images import save_fusion_weights, save_mask
from utils.log import banner
from utils.runtime import derive_seed

logger = logging.getLogger(__name__)

BCE_EPS = 1e-6
LOSS_NAMES = ('ce', 'adv', 'cont', 'ortho', 'disc_real', 'disc_fake', 'total')


@dataclass
class LossBundle:
    ce: torch.Tensor
    adv: torch.Tensor
    cont: torch.Tensor
    ortho: torch.Tensor
    disc_real: torch.Tensor
    disc_fake: torch.Tensor
    total: torch.Tensor

    def row(self) -> Dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in LOSS_NAMES}


@dataclass
class TrainResult:
    metrics: pd.DataFrame
    update_log: List[str] = field(default_factory=list)


@dataclass
class EvalResult:
    episodes: pd.DataFrame
    miou: float


def _check_finite(**components: torch.Tensor):
    for name, value in components.items():
        if not torch.isfinite(value).all():
            raise NumericalAbort(name, f"value={value.detach().cpu().tolist()}")


def _batches(episodes: Sequence[Episode], batch_size: int, with_query_masks: bool = True) -> Iterator[EpisodeBatch]:
    for start in range(0, len(episodes), batch_size):
        yield collate(episodes[start:start + batch_size], with_query_masks)


def _episodes(source: EpisodeSource, seeds: Sequence[int], k_shots: int) -> List[Episode]:
    return [source.episode(seed, k_shots) for seed in seeds]


# =============================================================================
# LOSSES
# =============================================================================

def segmentation_loss(prediction: Prediction, target_masks: torch.Tensor) -> torch.Tensor:
    """Pixel-wise binary cross-entropy of the query foreground score"""
    score = prediction.fg_score.clamp(BCE_EPS, 1 - BCE_EPS)
    return F.binary_cross_entropy(score, target_masks.float())


def main_loss(ce: torch.Tensor, cfg: TrainConfig, adv: Optional[torch.Tensor] = None,
              cont: Optional[torch.Tensor] = None, ortho: Optional[torch.Tensor] = None) -> LossBundle:
    """
    Weighted sum lambda_ce * ce + lambda_adv * adv + lambda_cont * cont + lambda_ortho * ortho

    Disabled components are passed as None and enter as exact zeros.
    """
    zero = ce.new_zeros(())
    adv = zero if adv is None else adv
    cont = zero if cont is None else cont
    ortho = zero if ortho is None else ortho
    _check_finite(ce=ce, adv=adv, cont=cont, ortho=ortho)
    total = cfg.lambda_ce * ce + cfg.lambda_adv * adv + cfg.lambda_cont * cont + cfg.lambda_ortho * ortho
    _check_finite(total=total)
    return LossBundle(ce=ce, adv=adv, cont=cont, ortho=ortho, disc_real=zero, disc_fake=zero, total=total)


def disc_loss(real_shared: torch.Tensor, fake_shared: torch.Tensor, disc: Discriminator,
              class_ids: Optional[torch.Tensor] = None) -> LossBundle:
    """
    L_real + L_fake with targets 1 (source) and 0 (pseudo-target), on detached features.
    With a class head, source class cross-entropy is added to the total.
    """
    if real_shared.shape[0] == 0 or fake_shared.shape[0] == 0:
        raise EmptyBatchError("discriminator loss needs nonempty real and fake batches")
    real_logits = discriminate(real_shared.detach(), disc)
    fake_logits = discriminate(fake_shared.detach(), disc)
    disc_real = F.binary_cross_entropy_with_logits(real_logits[:, 0], torch.ones_like(real_logits[:, 0]))
    disc_fake = F.binary_cross_entropy_with_logits(fake_logits[:, 0], torch.zeros_like(fake_logits[:, 0]))
    total = disc_real + disc_fake
    if class_ids is not None and disc.n_targets > 1:
        total = total + F.cross_entropy(real_logits[:, 1:], class_ids)
    _check_finite(disc_real=disc_real, disc_fake=disc_fake, total=total)
    zero = total.new_zeros(())
    return LossBundle(ce=zero, adv=zero, cont=zero, ortho=zero, disc_real=disc_real, disc_fake=disc_fake, total=total)


# =============================================================================
# PRETRAINING
# =============================================================================

def baseline_predict(net: DCDNet, batch: EpisodeBatch) -> Prediction:
    """SSP on backbone base features only"""
    b, k = batch.support_images.shape[:2]
    support = net.backbone(batch.support_images.flatten(0, 1)).base
    query = net.backbone(batch.query_images).base
    return ssp_predict(support.view(b, k, *support.shape[1:]), batch.support_masks, query, net.head_cfg,
                       tuple(batch.query_images.shape[-2:]))


def pretrain_baseline(net: DCDNet, cfg: RunConfig, source: EpisodeSource, device: torch.device,
                      checkpoint_path: Optional[Path] = None) -> TrainResult:
    """Episodic cross-entropy training of backbone + head on the source domain, then freeze"""
    banner(logger, 'pretrain', 'start', seed=cfg.seed, epochs=cfg.pretrain_epochs,
           episodes=cfg.episodes_per_epoch)
    params = [p for p in net.backbone.parameters() if p.requires_grad]
    rows = []
    if not params:
        logger.warning("Backbone already frozen, nothing to pretrain")
    else:
        optimizer = torch.optim.SGD(params, lr=cfg.lr_main, momentum=cfg.momentum)
        for epoch in range(cfg.pretrain_epochs):
            net.backbone.train()
            episodes = _episodes(source, episode_seeds(cfg.seed, 'pretrain', epoch, cfg.episodes_per_epoch), cfg.k_shots)
            losses, preds, gts = [], [], []
            for batch in _batches(episodes, cfg.batch_size):
                batch = batch.to(device)
                prediction = baseline_predict(net, batch)
                loss = segmentation_loss(prediction, batch.query_masks)
                _check_finite(ce=loss)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                losses.append(float(loss.detach()))
                preds.append(prediction)
                gts.extend(batch.query_masks.cpu())
            row = {'epoch': epoch + 1, 'phase': 'pretrain', 'ce': sum(losses) / len(losses),
                   'total': sum(losses) / len(losses), 'train_miou': miou(preds, gts, net.head_cfg.fg_only_miou)}
            rows.append(row)
            logger.info(f"[pretrain {epoch + 1}/{cfg.pretrain_epochs}] ce={row['ce']:.4f} miou={row['train_miou']:.4f}")
    net.backbone.freeze()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, net, 'pretrain', cfg.model_dump())
    banner(logger, 'pretrain', 'complete', epochs=len(rows))
    return TrainResult(metrics=pd.DataFrame(rows))


# =============================================================================
# SOURCE TRAINING
# =============================================================================

def source_losses(net: DCDNet, batch: EpisodeBatch, prediction: Prediction, decomposed,
                  pseudo: Optional[torch.Tensor], grl, cfg: RunConfig) -> LossBundle:
    sw = net.switches
    ce = segmentation_loss(prediction, batch.query_masks)
    adv = cont = ortho = None
    if decomposed is not None and sw.use_acfd:
        if sw.use_adv:
            adv = adversarial_loss(decomposed.shared, net.decompose(pseudo).shared, net.discriminator, grl)
        if sw.use_cont:
            cont = contrastive_loss(decomposed.private, batch.query_masks, batch.class_ids, net.bank,
                                    net.projection_head, cfg.tau, cfg.pixels_per_class, cfg.bank_enqueue_cap).loss
        if sw.use_ortho:
            ortho_fn = scale_free_orthogonality_loss if cfg.ortho_scale_free else orthogonality_loss
            ortho = ortho_fn(decomposed.shared, decomposed.private)
    return main_loss(ce, cfg, adv=adv, cont=cont, ortho=ortho)


def train_dcdnet(net: DCDNet, cfg: RunConfig, source: EpisodeSource, device: torch.device,
                 checkpoint_path: Optional[Path] = None, weights_dir: Optional[Path] = None) -> TrainResult:
    """
    Alternating optimization: per batch, s_steps SGD updates of the main model on
    the composite loss, then d_steps Adam updates of the discriminator.

    Args:
        net: Network with a frozen, pretrained backbone
        cfg: Run config (schedule, loss weights, switches already applied to net)
        source: Source-domain episode source
        checkpoint_path: Rewritten atomically after every epoch
        weights_dir: Optional directory for per-epoch fusion-weight PNGs
    """
    sw = net.switches
    if not net.backbone.frozen:
        logger.warning("Backbone not frozen before source training, freezing now")
        net.backbone.freeze()
    net.set_phase('train')
    adversarial = sw.decomposed and sw.use_acfd and sw.use_adv

    main_opt = torch.optim.SGD(net.main_parameters(), lr=cfg.lr_main, momentum=cfg.momentum)
    disc_opt = torch.optim.Adam(net.discriminator.parameters(), lr=cfg.lr_disc, weight_decay=cfg.weight_decay_disc)
    class_head = cfg.disc_class_head and net.discriminator.n_targets > 1

    per_epoch = math.ceil(cfg.episodes_per_epoch / cfg.batch_size)
    total_iterations = max(cfg.epochs * per_epoch, 1)
    banner(logger, 'train', 'start', seed=cfg.seed, epochs=cfg.epochs, iterations=total_iterations,
           s_steps=cfg.s_steps, d_steps=cfg.d_steps, adversarial=adversarial)

    update_log: List[str] = []
    rows = []
    iteration = 0
    for epoch in range(cfg.epochs):
        net.train()
        episodes = _episodes(source, episode_seeds(cfg.seed, 'train', epoch, cfg.episodes_per_epoch), cfg.k_shots)
        sums: Dict[str, float] = defaultdict(float)
        correlations, preds, gts = [], [], []
        grl = grl_schedule(iteration, total_iterations, cfg.lambda_grl, cfg.grl_warmup_frac)
        last_weights = None

        for batch_index, batch in enumerate(_batches(episodes, cfg.batch_size)):
            batch = batch.to(device)
            grl = grl_schedule(iteration, total_iterations, cfg.lambda_grl, cfg.grl_warmup_frac)
            pseudo = None
            if adversarial:
                pseudo = make_pseudo_target(batch.query_images,
                                            derive_seed(cfg.seed, PHASE_CODES['pseudo'], epoch, batch_index))

            for _ in range(cfg.s_steps):
                out = net(batch, head='ssp')
                bundle = source_losses(net, batch, out.prediction, out.query.decomposed, pseudo, grl, cfg)
                main_opt.zero_grad(set_to_none=True)
                if bundle.total.requires_grad:
                    bundle.total.backward()
                    main_opt.step()
                update_log.append('main')

            if adversarial:
                for _ in range(cfg.d_steps):
                    with torch.no_grad():
                        real = net.decompose(batch.query_images).shared
                        fake = net.decompose(pseudo).shared
                    d_bundle = disc_loss(real, fake, net.discriminator, batch.class_ids if class_head else None)
                    disc_opt.zero_grad(set_to_none=True)
                    d_bundle.total.backward()
                    disc_opt.step()
                    update_log.append('disc')
                bundle.disc_real, bundle.disc_fake = d_bundle.disc_real, d_bundle.disc_fake

            for name, value in bundle.row().items():
                sums[name] += value
            preds.append(out.prediction)
            gts.extend(batch.query_masks.cpu())
            if out.query.decomposed is not None:
                correlations.append(channel_correlation(out.query.decomposed.shared, out.query.decomposed.private))
            last_weights = out.query.weights
            iteration += 1

        row = {'epoch': epoch + 1, 'phase': 'train'}
        row.update({name: sums[name] / per_epoch for name in LOSS_NAMES})
        row['sp_corr'] = sum(correlations) / len(correlations) if correlations else 0.0
        row['lambda_grl'] = grl.lambda_grl
        row['train_miou'] = miou(preds, gts, net.head_cfg.fg_only_miou)
        rows.append(row)
        logger.info(f"[epoch {epoch + 1}/{cfg.epochs}] total={row['total']:.4f} ce={row['ce']:.4f} "
                    f"adv={row['adv']:.4f} cont={row['cont']:.4f} ortho={row['ortho']:.4f} "
                    f"sp_corr={row['sp_corr']:.4f} miou={row['train_miou']:.4f}")

        if weights_dir is not None and last_weights is not None:
            save_fusion_weights(last_weights, weights_dir, prefix=f"epoch{epoch + 1:03d}")
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, net, 'train', cfg.model_dump(), extra={'epoch': epoch + 1})

    banner(logger, 'train', 'complete', epochs=cfg.epochs, updates=len(update_log))
    return TrainResult(metrics=pd.DataFrame(rows), update_log=update_log)


# =============================================================================
# TARGET FINE-TUNING
# =============================================================================

def pseudo_episode(support: SupportSet, epoch: int, seed: int) -> Episode:
    """
    Self-supervised episode from supports only: one augmented support plays the
    query, the rest stay supports. A single shot yields two augmented copies.
    """
    base = derive_seed(seed, PHASE_CODES['finetune'], support.domain_id, support.episode_index, epoch)
    pairs = list(zip(support.images, support.masks))
    if len(pairs) == 1:
        image, mask = pairs[0]
        supports = [augment_support(image, mask, derive_seed(base, 0))]
        query = augment_support(image, mask, derive_seed(base, 1))
    else:
        held_out = epoch % len(pairs)
        supports = [augment_support(img, m, derive_seed(base, i)) for i, (img, m) in enumerate(pairs) if i != held_out]
        query = augment_support(*pairs[held_out], derive_seed(base, held_out))
    return Episode(support=supports, query_image=query[0], query_mask=query[1],
                   class_id=support.class_id, domain_id=support.domain_id, seed=base)


def finetune_optimizer(net: DCDNet, cfg: RunConfig, domain_id: int) -> torch.optim.SGD:
    """
    SGD over the decomposition branches and fusion at the domain's learning rate;
    a freshly attached CAM gets its own group at cam_lr_scale times that rate
    """
    lr = cfg.finetune_lr(domain_id)
    params = [p for m in (net.decomposer, net.fusion) for p in m.parameters() if p.requires_grad]
    groups = [{'params': params, 'lr': lr, 'name': 'adapted'}]
    if net.cam is not None:
        groups.append({'params': [p for p in net.cam.parameters() if p.requires_grad],
                       'lr': lr * cfg.cam_lr_scale, 'name': 'cam'})
    return torch.optim.SGD(groups, lr=lr, momentum=cfg.momentum)


def finetune_target(net: DCDNet, guard: QueryMaskGuard, cfg: RunConfig, domain_id: int,
                    device: torch.device) -> TrainResult:
    """
    Support-only adaptation: fresh identity CAM, BFP head, SGD over CAM, fusion
    and decomposition branches. The discriminator takes no part.
    """
    net.set_phase('finetune')
    if net.switches.use_cam and net.switches.decomposed:
        net.attach_cam()
    optimizer = finetune_optimizer(net, cfg, domain_id)
    lr = cfg.finetune_lr(domain_id)
    supports = guard.support_sets()
    banner(logger, 'finetune', 'start', domain=domain_id, supports=len(supports), epochs=cfg.finetune_epochs, lr=lr,
           cam=net.cam is not None)

    rows = []
    for epoch in range(cfg.finetune_epochs):
        net.train()
        episodes = [pseudo_episode(s, epoch, cfg.seed) for s in supports]
        losses = []
        for batch in _batches(episodes, cfg.batch_size):
            batch = batch.to(device)
            loss = segmentation_loss(net(batch, head='bfp').prediction, batch.query_masks)
            _check_finite(ce=loss)
            optimizer.zero_grad(set_to_none=True)
            if loss.requires_grad:
                loss.backward()
                optimizer.step()
            losses.append(float(loss.detach()))
        row = {'epoch': epoch + 1, 'phase': 'finetune', 'domain_id': domain_id, 'ce': sum(losses) / len(losses)}
        rows.append(row)
        logger.info(f"[finetune d{domain_id} {epoch + 1}/{cfg.finetune_epochs}] ce={row['ce']:.4f}")

    net.set_phase('test')
    banner(logger, 'finetune', 'complete', domain=domain_id, query_mask_accesses=guard.accesses)
    return TrainResult(metrics=pd.DataFrame(rows))


# =============================================================================
# EVALUATION
# =============================================================================

def eval_episodes(source: EpisodeSource, domain: DomainSpec, cfg: RunConfig, k_shots: int) -> List[Episode]:
    seeds = episode_seeds(cfg.seed, 'eval', 0, cfg.eval_episodes, domain.domain_id)
    return _episodes(source, seeds, k_shots)


@torch.no_grad()
def evaluate(net: DCDNet, episodes: Sequence[Episode], device: torch.device, batch_size: int = 8,
             export_dir: Optional[Path] = None) -> EvalResult:
    """BFP predictions for every episode; per-episode IoU rows plus the pooled mIoU"""
    net.set_phase('test')
    net.eval()
    rows, preds, gts = [], [], []
    for start, batch in zip(range(0, len(episodes), batch_size), _batches(episodes, batch_size)):
        prediction = net(batch.to(device), head='bfp').prediction
        for offset, (mask, gt) in enumerate(zip(prediction.mask.cpu(), batch.query_masks)):
            episode = episodes[start + offset]
            fg_iou, bg_iou = episode_iou(mask, gt)
            rows.append({'episode_id': start + offset, 'domain_id': episode.domain_id, 'class_id': episode.class_id,
                         'k_shots': episode.k_shots, 'fg_iou': fg_iou, 'bg_iou': bg_iou})
            preds.append(mask)
            gts.append(gt)
            if export_dir is not None:
                save_mask(mask.numpy().astype('uint8'),
                          Path(export_dir) / f"pred_d{episode.domain_id}_k{episode.k_shots}_{start + offset:04d}.pgm")
    return EvalResult(episodes=pd.DataFrame(rows), miou=miou(preds, gts, net.head_cfg.fg_only_miou))


def network_from_checkpoint(cfg: RunConfig, payload: Optional[Dict[str, Any]], device: torch.device) -> DCDNet:
    net = build_network(cfg, device)
    if payload is not None:
        restore(net, payload)
        net.to(device)
    return net


def target_protocol(cfg: RunConfig, payload: Dict[str, Any], source: EpisodeSource, domain: DomainSpec,
                    k_shots: int, device: torch.device, checkpoint_path: Optional[Path] = None) -> Dict[str, Any]:
    """
    Evaluate a source checkpoint on one target domain before and after
    support-only fine-tuning on the same evaluation episodes
    """
    net = network_from_checkpoint(cfg, payload, device)
    episodes = eval_episodes(source, domain, cfg, k_shots)
    before = evaluate(net, episodes, device, cfg.batch_size)

    guard = QueryMaskGuard(episodes)
    finetune = finetune_target(net, guard, cfg, domain.domain_id, device)
    after = evaluate(net, episodes, device, cfg.batch_size)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, net, 'finetune', cfg.model_dump(),
                        extra={'domain_id': domain.domain_id, 'k_shots': k_shots})
    logger.info(f"[d{domain.domain_id} k{k_shots}] miou before={before.miou:.4f} after={after.miou:.4f}")
    return {
        'domain_id': domain.domain_id,
        'k_shots': k_shots,
        'miou_before': before.miou,
        'miou_after': after.miou,
        'query_mask_accesses': guard.accesses,
        'episodes': after.episodes,
        'finetune': finetune.metrics,
    }
