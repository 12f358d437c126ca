"""Shared tiny configurations: 32x32 images, a handful of episodes, narrow channels"""

import pytest
import torch

from models import RunConfig
from services.data_synth import LiveEpisodeSource, build_domains, collate

TINY = dict(
    image_size=32,
    n_source_classes=4,
    n_target_domains=2,
    classes_per_target=2,
    episodes_per_epoch=4,
    eval_episodes=4,
    c_shared=8,
    c_private=16,
    c_f=16,
    d_proj=8,
    bank_capacity=64,
    bank_enqueue_cap=16,
    pixels_per_class=8,
    disc_hidden=16,
    pretrain_epochs=1,
    epochs=1,
    finetune_epochs=1,
    batch_size=2,
    shots=[1],
    ablation_seeds=[0],
    run_name='test-run',
)


@pytest.fixture
def tiny_cfg(tmp_path) -> RunConfig:
    torch.manual_seed(0)
    return RunConfig(**TINY, out_dir=str(tmp_path / 'runs'))


@pytest.fixture
def domains(tiny_cfg):
    return build_domains(0, tiny_cfg.n_source_classes, tiny_cfg.n_target_domains, tiny_cfg.classes_per_target)


@pytest.fixture
def source(domains, tiny_cfg):
    return LiveEpisodeSource(domains[0], tiny_cfg.image_size)


@pytest.fixture
def batch(source):
    return collate([source.episode(seed, 1) for seed in (11, 12)])


@pytest.fixture
def cpu():
    return torch.device('cpu')


@pytest.fixture
def pretrained(tiny_cfg, source, cpu, tmp_path):
    """Network with a pretrained, frozen backbone and the checkpoint it was saved to"""
    from services.network import build_network
    from services.trainer import pretrain_baseline
    from utils.runtime import seed_everything

    seed_everything(0)
    net = build_network(tiny_cfg, cpu)
    path = tmp_path / 'pretrain.pt'
    pretrain_baseline(net, tiny_cfg, source, cpu, path)
    return net, path


def write_config(path, **values) -> str:
    """key=value run file from TINY plus overrides"""
    merged = {**TINY, **values}
    lines = []
    for key, value in merged.items():
        if isinstance(value, list):
            value = ','.join(str(v) for v in value)
        lines.append(f"{key}={value}")
    path.write_text('\n'.join(lines) + '\n')
    return str(path)
