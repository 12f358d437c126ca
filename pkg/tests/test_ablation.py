import pytest

from services.ablation import ablation_rows, run_ablation_suite, run_cell


def test_rows_cover_three_tables():
    rows = ablation_rows()
    assert len(rows) == 12
    assert [r.table for r in rows].count('module') == 4
    assert [r.table for r in rows].count('feature') == 3
    assert [r.table for r in rows].count('loss') == 5
    full = {r.switches for r in rows if r.label in ('+MGDF+ACFD+CAM', 'base+private+shared', 'bce+adv+cont+ortho')}
    assert len(full) == 1


def test_baseline_row_disables_everything():
    baseline = ablation_rows()[0].switch_dict
    assert not any(baseline[k] for k in ('use_mgdf', 'use_acfd', 'use_cam', 'use_adv', 'use_cont', 'use_ortho'))


def test_suite_deduplicates_and_averages(tiny_cfg):
    cfg = tiny_cfg.model_copy(update={'ablation_seeds': [0, 1]})
    calls = []

    def runner(config, switches, seed, checkpoint):
        calls.append((tuple(sorted(switches.items())), seed, checkpoint))
        return {'seed': seed, 'switches': switches, 'per_domain': {}, 'miou': 0.5 + 0.1 * seed}

    report = run_ablation_suite(cfg, {0: 'a.pt', 1: 'b.pt'}, runner)
    assert len(calls) == 10 * 2
    assert {c[2] for c in calls if c[1] == 1} == {'b.pt'}
    assert report.table['miou'].tolist() == pytest.approx([55.0] * 12)
    assert list(report.tables()) == ['module', 'feature', 'loss']
    assert '## Loss ablation' in report.markdown()
    assert report.table.loc[3, 'reference_full_scale'] == 81.7


def test_cell_end_to_end(pretrained, tiny_cfg):
    _, path = pretrained
    config = tiny_cfg.model_dump()
    switches = ablation_rows()[0].switch_dict
    result = run_cell(config, switches, 0, str(path))
    assert set(result['per_domain']) == {'1', '2'}
    assert 0.0 <= result['miou'] <= 1.0
