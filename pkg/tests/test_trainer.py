import math

import numpy as np
import pytest
import torch

from models import NumericalAbort, TrainConfig
from services.acfd import Discriminator, channel_correlation, scale_free_orthogonality_loss
from services.data_synth import QueryMaskGuard, collate
from services.network import build_network
from services.trainer import (
    disc_loss, eval_episodes, evaluate, finetune_optimizer, finetune_target, main_loss, network_from_checkpoint,
    pseudo_episode, source_losses, target_protocol, train_dcdnet
)
from utils.checkpoint import load_checkpoint, snapshot
from utils.runtime import parameter_checksum, seed_everything


def test_main_loss_is_linear_in_weights():
    cfg = TrainConfig(lambda_ce=1.0, lambda_adv=0.5, lambda_cont=0.25, lambda_ortho=2.0)
    bundle = main_loss(torch.tensor(1.0), cfg, adv=torch.tensor(2.0), cont=torch.tensor(4.0),
                       ortho=torch.tensor(0.5))
    assert bundle.total.item() == pytest.approx(1.0 + 1.0 + 1.0 + 1.0)


def test_main_loss_disabled_terms_are_zero():
    bundle = main_loss(torch.tensor(0.3), TrainConfig())
    assert bundle.adv.item() == 0.0 and bundle.cont.item() == 0.0 and bundle.ortho.item() == 0.0
    assert bundle.total.item() == pytest.approx(0.3)


def test_main_loss_aborts_on_nan():
    with pytest.raises(NumericalAbort) as info:
        main_loss(torch.tensor(1.0), TrainConfig(), adv=torch.tensor(float('nan')))
    assert info.value.component == 'adv'
    assert info.value.exit_code == 3


def test_uniform_discriminator_costs_two_log_two():
    disc = Discriminator(4, hidden=8)
    torch.nn.init.zeros_(disc.mlp[-1].weight)
    torch.nn.init.zeros_(disc.mlp[-1].bias)
    feats = torch.randn(3, 4, 2, 2)
    bundle = disc_loss(feats, feats, disc)
    assert bundle.total.item() == pytest.approx(2 * math.log(2), abs=1e-6)
    assert bundle.disc_real.item() == pytest.approx(math.log(2), abs=1e-6)


def test_disc_loss_does_not_reach_features():
    disc = Discriminator(4, hidden=8)
    feats = torch.randn(2, 4, 2, 2, requires_grad=True)
    disc_loss(feats, feats * 2, disc).total.backward()
    assert feats.grad is None


def test_disc_class_head_adds_classification():
    torch.manual_seed(0)
    disc = Discriminator(4, hidden=8, n_classes=3)
    feats = torch.randn(2, 4, 2, 2)
    plain = disc_loss(feats, feats, disc).total
    with_classes = disc_loss(feats, feats, disc, torch.tensor([0, 2])).total
    assert with_classes.item() > plain.item()


def test_source_losses_follow_switches(tiny_cfg, batch):
    cfg = tiny_cfg.model_copy(update={'use_adv': False, 'use_ortho': False})
    net = build_network(cfg)
    out = net(batch, head='ssp')
    bundle = source_losses(net, batch, out.prediction, out.query.decomposed, None, None, cfg)
    assert bundle.adv.item() == 0.0 and bundle.ortho.item() == 0.0
    assert bundle.cont.requires_grad


def test_pretrain_freezes_backbone(pretrained):
    net, path = pretrained
    assert net.backbone.frozen
    assert all(not p.requires_grad for p in net.backbone.parameters())
    assert load_checkpoint(path)['phase'] == 'pretrain'


def test_training_alternates_and_keeps_backbone_fixed(pretrained, tiny_cfg, source, cpu):
    net, _ = pretrained
    cfg = tiny_cfg.model_copy(update={'s_steps': 2, 'd_steps': 3})
    backbone_before = parameter_checksum(net.backbone)
    disc_before = parameter_checksum(net.discriminator)
    result = train_dcdnet(net, cfg, source, cpu)

    batches = math.ceil(cfg.episodes_per_epoch / cfg.batch_size)
    assert result.update_log == (['main'] * 2 + ['disc'] * 3) * batches
    assert parameter_checksum(net.backbone) == backbone_before
    assert parameter_checksum(net.discriminator) != disc_before
    row = result.metrics.iloc[0]
    assert np.isfinite(row[['ce', 'adv', 'cont', 'ortho', 'total']].astype(float)).all()
    assert 0.0 <= row['train_miou'] <= 1.0


def test_main_updates_leave_discriminator_untouched(pretrained, tiny_cfg, source, cpu):
    _, path = pretrained
    cfg = tiny_cfg.model_copy(update={'use_adv': False})
    net = network_from_checkpoint(cfg, load_checkpoint(path), cpu)
    disc_before = parameter_checksum(net.discriminator)
    result = train_dcdnet(net, cfg, source, cpu)
    assert set(result.update_log) == {'main'}
    assert parameter_checksum(net.discriminator) == disc_before


def test_training_writes_checkpoint_and_weight_maps(pretrained, tiny_cfg, source, cpu, tmp_path):
    net, _ = pretrained
    train_dcdnet(net, tiny_cfg, source, cpu, checkpoint_path=tmp_path / 'dcdnet.pt', weights_dir=tmp_path / 'fusion')
    payload = load_checkpoint(tmp_path / 'dcdnet.pt')
    assert payload['phase'] == 'train' and payload['extra'] == {'epoch': 1}
    assert sorted(p.name for p in (tmp_path / 'fusion').iterdir()) == [
        'epoch001_w_b.png', 'epoch001_w_p.png', 'epoch001_w_s.png']


def test_training_is_deterministic(tiny_cfg, source, cpu):
    from services.trainer import pretrain_baseline

    runs = []
    for _ in range(2):
        seed_everything(0)
        net = build_network(tiny_cfg, cpu)
        pretrain_baseline(net, tiny_cfg, source, cpu)
        runs.append((train_dcdnet(net, tiny_cfg, source, cpu).metrics, parameter_checksum(net)))
    assert runs[0][0].equals(runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_pseudo_episode_from_single_shot(source):
    guard = QueryMaskGuard([source.episode(3, 1)])
    support = guard.support_sets()[0]
    episode = pseudo_episode(support, epoch=0, seed=0)
    assert episode.k_shots == 1
    assert episode.query_mask.sum() == support.masks[0].sum()


def test_pseudo_episode_holds_out_one_shot(source):
    support = QueryMaskGuard([source.episode(3, 3)]).support_sets()[0]
    assert pseudo_episode(support, epoch=4, seed=0).k_shots == 2


def test_zero_epoch_finetune_changes_nothing(pretrained, tiny_cfg, domains, cpu):
    from services.data_synth import LiveEpisodeSource

    net, _ = pretrained
    cfg = tiny_cfg.model_copy(update={'finetune_epochs': 0})
    domain = domains[1]
    episodes = eval_episodes(LiveEpisodeSource(domain, cfg.image_size), domain, cfg, 1)
    batch = collate(episodes[:2])
    with torch.no_grad():
        net.set_phase('test')
        before = net(batch, head='bfp').prediction.fg_score
        finetune_target(net, QueryMaskGuard(episodes), cfg, domain.domain_id, cpu)
        after = net(batch, head='bfp').prediction.fg_score
    assert net.cam is not None and net.modulating
    assert torch.equal(before, after)


def test_finetune_never_reads_query_masks(pretrained, tiny_cfg, domains, cpu):
    from services.data_synth import LiveEpisodeSource

    net, _ = pretrained
    domain = domains[2]
    payload = snapshot(net, 'train', tiny_cfg.model_dump())
    result = target_protocol(tiny_cfg, payload, LiveEpisodeSource(domain, tiny_cfg.image_size), domain, 1, cpu)
    assert result['query_mask_accesses'] == 0
    assert 0.0 <= result['miou_before'] <= 1.0 and 0.0 <= result['miou_after'] <= 1.0
    assert list(result['episodes'].columns) == ['episode_id', 'domain_id', 'class_id', 'k_shots', 'fg_iou', 'bg_iou']
    assert len(result['finetune']) == tiny_cfg.finetune_epochs


def test_finetune_learning_rate_override(pretrained, tiny_cfg, domains, cpu, caplog):
    from services.data_synth import LiveEpisodeSource

    net, _ = pretrained
    cfg = tiny_cfg.model_copy(update={'finetune_lr_overrides': {2: 1e-5}})
    domain = domains[2]
    episodes = eval_episodes(LiveEpisodeSource(domain, cfg.image_size), domain, cfg, 1)
    with caplog.at_level('INFO'):
        finetune_target(net, QueryMaskGuard(episodes), cfg, domain.domain_id, cpu)
    assert 'lr=1e-05' in caplog.text


def test_evaluate_exports_masks(tiny_cfg, source, domains, cpu, tmp_path):
    net = build_network(tiny_cfg, cpu)
    episodes = eval_episodes(source, domains[0], tiny_cfg, 1)
    result = evaluate(net, episodes, cpu, batch_size=3, export_dir=tmp_path)
    assert len(result.episodes) == tiny_cfg.eval_episodes
    assert len(list(tmp_path.glob('pred_d0_k1_*.pgm'))) == tiny_cfg.eval_episodes
    assert result.episodes['episode_id'].tolist() == list(range(tiny_cfg.eval_episodes))


def test_orthogonality_training_decorrelates_branches(pretrained, tiny_cfg, source, batch, cpu):
    _, path = pretrained
    cfg = tiny_cfg.model_copy(update={'use_adv': False, 'use_cont': False, 'lambda_ce': 0.0, 'lambda_ortho': 5.0,
                                      'lr_main': 0.01, 'epochs': 10, 'episodes_per_epoch': 8})
    net = network_from_checkpoint(cfg, load_checkpoint(path), cpu)

    def measure():
        with torch.no_grad():
            decomposed = net.decompose(batch.query_images)
            return (channel_correlation(decomposed.shared, decomposed.private),
                    scale_free_orthogonality_loss(decomposed.shared, decomposed.private).item())

    corr_before, ortho_before = measure()
    result = train_dcdnet(net, cfg, source, cpu)
    corr_after, ortho_after = measure()
    assert ortho_after < ortho_before
    assert corr_after < corr_before
    assert result.metrics['ortho'].iloc[-1] < result.metrics['ortho'].iloc[0]


def test_finetune_optimizer_gives_cam_its_own_rate(pretrained, tiny_cfg):
    net, _ = pretrained
    cfg = tiny_cfg.model_copy(update={'finetune_lr_overrides': {2: 1e-5}, 'cam_lr_scale': 20.0})
    assert [g['name'] for g in finetune_optimizer(net, cfg, 2).param_groups] == ['adapted']

    net.attach_cam()
    groups = {g['name']: g for g in finetune_optimizer(net, cfg, 2).param_groups}
    assert groups['adapted']['lr'] == 1e-5
    assert groups['cam']['lr'] == pytest.approx(2e-4)
    cam_ids = {id(p) for p in net.cam.parameters()}
    assert {id(p) for p in groups['cam']['params']} == cam_ids
    assert not cam_ids & {id(p) for p in groups['adapted']['params']}
    assert not {id(p) for p in net.discriminator.parameters()} & {id(p) for p in groups['adapted']['params']}


def test_finetune_moves_the_modulation_block(pretrained, tiny_cfg, domains, cpu):
    from services.data_synth import LiveEpisodeSource

    net, _ = pretrained
    domain = domains[1]
    episodes = eval_episodes(LiveEpisodeSource(domain, tiny_cfg.image_size), domain, tiny_cfg, 1)
    finetune_target(net, QueryMaskGuard(episodes), tiny_cfg, domain.domain_id, cpu)
    assert net.cam is not None
    assert net.cam.param_conv.weight.abs().sum().item() > 0
    assert net.cam.param_conv.bias.abs().sum().item() > 0

    with torch.no_grad():
        decomposed = net.decomposer(net.backbone(collate(episodes[:2]).query_images))
        modulated = net.cam(decomposed.shared, decomposed.private)
    assert not torch.equal(modulated, decomposed.private)
