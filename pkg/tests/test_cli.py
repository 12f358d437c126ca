import json

import pandas as pd
import pytest

from cli import main
from tests.conftest import write_config


@pytest.fixture
def run_cfg(tmp_path):
    return write_config(tmp_path / 'tiny.cfg', run_name='')


def args(run_cfg, tmp_path, command, *extra, run='run'):
    return [command, '--config', run_cfg, '--out', str(tmp_path / 'out'), '--override', f'run_name={run}', *extra]


def test_finetune_without_checkpoint_exits_2(run_cfg, tmp_path):
    assert main(args(run_cfg, tmp_path, 'finetune')) == 2


def test_missing_checkpoint_file_exits_2(run_cfg, tmp_path):
    assert main(args(run_cfg, tmp_path, 'eval', '--checkpoint', str(tmp_path / 'nope.pt'))) == 2


def test_bad_config_exits_1(tmp_path):
    path = tmp_path / 'bad.cfg'
    path.write_text('epochz=3\n')
    assert main(['check', '--config', str(path)]) == 1


def test_unknown_domain_exits_1(run_cfg, tmp_path):
    assert main(args(run_cfg, tmp_path, 'eval', '--domains', '9')) == 1


def test_eval_untrained_network(run_cfg, tmp_path, capsys):
    assert main(args(run_cfg, tmp_path, 'eval', '--export-masks')) == 0
    run = tmp_path / 'out' / 'run'
    domains = pd.read_csv(run / 'domains.csv')
    assert sorted(domains['domain_id']) == [1, 2]
    assert domains['miou'].between(0, 1).all()
    assert (run / 'miou.html').exists() and (run / 'config.resolved').exists()
    assert len(list((run / 'predictions').glob('*.pgm'))) == 2 * 4
    assert 'Per-domain mIoU' in capsys.readouterr().out


def test_check_command(tmp_path):
    assert main(['check', '--out', str(tmp_path)]) == 0
    assert main(['check', '--out', str(tmp_path), '--corrupt-grl']) == 4


def test_export_command(run_cfg, tmp_path):
    assert main(args(run_cfg, tmp_path, 'export', '--scenes-per-class', '2')) == 0
    data = tmp_path / 'out' / 'run' / 'data'
    assert sorted(p.name for p in data.iterdir()) == ['domain_0', 'domain_1', 'domain_2']
    manifest = (data / 'domain_1' / 'manifest.txt').read_text().splitlines()
    assert len(manifest) == 1 + 2 * 2


def test_train_then_finetune(run_cfg, tmp_path, capsys):
    assert main(args(run_cfg, tmp_path, 'train', '--from-scratch', run='train')) == 0
    trained = tmp_path / 'out' / 'train'
    metrics = pd.read_csv(trained / 'metrics.csv')
    assert {'ce', 'adv', 'cont', 'ortho', 'total', 'sp_corr', 'train_miou'} <= set(metrics.columns)
    summary = json.loads((trained / 'summary.json').read_text())
    assert summary['updates']['main'] == summary['updates']['disc'] == 2

    checkpoint = str(trained / 'dcdnet.pt')
    assert main(args(run_cfg, tmp_path, 'finetune', '--checkpoint', checkpoint, run='ft')) == 0
    domains = pd.read_csv(tmp_path / 'out' / 'ft' / 'domains.csv')
    assert (domains['query_mask_accesses'] == 0).all()
    assert 'before / after' in capsys.readouterr().out


def test_same_seed_gives_identical_csv_files(run_cfg, tmp_path):
    for run in ('first', 'second'):
        assert main(args(run_cfg, tmp_path, 'train', '--from-scratch', '--seed', '3', run=run)) == 0
        checkpoint = str(tmp_path / 'out' / run / 'dcdnet.pt')
        assert main(args(run_cfg, tmp_path, 'eval', '--seed', '3', '--checkpoint', checkpoint, run=f'{run}-eval')) == 0
    out = tmp_path / 'out'
    for name in ('metrics.csv', 'pretrain_metrics.csv'):
        assert (out / 'first' / name).read_bytes() == (out / 'second' / name).read_bytes()
    for name in ('domains.csv', 'episodes.csv'):
        assert (out / 'first-eval' / name).read_bytes() == (out / 'second-eval' / name).read_bytes()
