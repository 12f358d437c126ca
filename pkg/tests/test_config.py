import pytest

from models import AblationSwitches, ConfigError, MissingArtifactError, RunConfig, RunLockedError, TrainConfig
from utils.artifacts import RunDirectory, run_dir_name
from utils.config import load_run_config, read_config_file, resolved_text, write_resolved

from tests.conftest import write_config


def test_file_values_and_types(tmp_path):
    cfg = load_run_config(write_config(tmp_path / 'run.cfg', finetune_lr_overrides='3:1e-5,2:5e-4'))
    assert cfg.image_size == 32
    assert cfg.shots == [1]
    assert cfg.finetune_lr(3) == pytest.approx(1e-5)
    assert cfg.finetune_lr(1) == cfg.lr_finetune


def test_flags_and_overrides_win(tmp_path):
    path = write_config(tmp_path / 'run.cfg')
    cfg = load_run_config(path, ['epochs=3', 'use_cam=false'], seed=7, shots='1,5', out_dir=str(tmp_path))
    assert (cfg.seed, cfg.epochs, cfg.use_cam, cfg.shots) == (7, 3, False, [1, 5])


def test_environment_defaults(monkeypatch):
    monkeypatch.setenv('DCDNET_OUT_DIR', '/tmp/elsewhere')
    assert load_run_config().out_dir == '/tmp/elsewhere'


def test_unknown_key_reports_line(tmp_path):
    path = tmp_path / 'bad.cfg'
    path.write_text('seed=1\n# comment\nlearning_rate=0.1\n')
    with pytest.raises(ConfigError) as info:
        read_config_file(path)
    assert info.value.line == 3
    assert info.value.exit_code == 1


def test_invalid_value_reports_line(tmp_path):
    path = tmp_path / 'bad.cfg'
    path.write_text('seed=1\nepochs=-2\n')
    with pytest.raises(ConfigError) as info:
        load_run_config(path)
    assert info.value.line == 2


def test_bad_override():
    with pytest.raises(ConfigError):
        load_run_config(overrides=['epochs'])
    with pytest.raises(ConfigError):
        load_run_config(overrides=['nonsense=1'])


def test_missing_config_file(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_run_config(tmp_path / 'none.cfg')


def test_mgdf_needs_one_feature():
    with pytest.raises(ValueError):
        AblationSwitches(use_base=False, use_private=False, use_shared=False)
    with pytest.raises(ConfigError):
        load_run_config(overrides=['use_base=false', 'use_private=false', 'use_shared=false'])


def test_resolved_config_reloads(tiny_cfg, tmp_path):
    path = write_resolved(tiny_cfg.model_copy(update={'finetune_lr_overrides': {3: 1e-5}}), tmp_path)
    reloaded = load_run_config(path)
    for key in ('seed', 'shots', 'image_size', 'use_cam', 'tau', 'finetune_lr_overrides', 'run_name'):
        assert getattr(reloaded, key) == (getattr(tiny_cfg, key) if key != 'finetune_lr_overrides' else {3: 1e-5})
    assert resolved_text(reloaded) == path.read_text()


def test_full_scale_schedule():
    scaled = TrainConfig().full_scale()
    assert (scaled.epochs, scaled.finetune_epochs, scaled.batch_size) == (20, 40, 8)
    assert scaled.finetune_lr(3) == 1e-5


def test_sections_are_views(tiny_cfg):
    switches = tiny_cfg.section(AblationSwitches)
    assert switches.model_dump() == {name: getattr(tiny_cfg, name) for name in AblationSwitches.model_fields}
    assert isinstance(tiny_cfg, RunConfig)


def test_run_directory_lock(tiny_cfg):
    assert run_dir_name(tiny_cfg) == 'test-run'
    with RunDirectory(tiny_cfg) as run:
        assert (run.path / 'config.resolved').exists()
        with pytest.raises(RunLockedError):
            with RunDirectory(tiny_cfg):
                pass
    assert not (run.path / '.lock').exists()


def test_run_directory_writers(tiny_cfg):
    import numpy as np
    import pandas as pd

    with RunDirectory(tiny_cfg) as run:
        csv = run.write_csv(pd.DataFrame({'a': [0.5, 1 / 3]}), 'table.csv')
        summary = run.write_json({'count': np.int64(4), 'miou': np.float64(0.25)})
    assert csv.read_text() == 'a\n0.500000\n0.333333\n'
    assert '"count": 4' in summary.read_text()
