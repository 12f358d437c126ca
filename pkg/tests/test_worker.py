import services.ablation
from worker import dispatch_cell, run_ablation_cell, self_check


def test_cell_task_runs_in_process(monkeypatch):
    seen = {}

    def fake_cell(config, switches, seed, checkpoint):
        seen.update(config=config, switches=switches, seed=seed, checkpoint=checkpoint)
        return {'seed': seed, 'switches': switches, 'per_domain': {'1': 0.5}, 'miou': 0.5}

    monkeypatch.setattr(services.ablation, 'run_cell', fake_cell)
    result = dispatch_cell()({'epochs': 1}, {'use_cam': False}, 2, 'pre.pt')
    assert result['miou'] == 0.5
    assert seen == {'config': {'epochs': 1}, 'switches': {'use_cam': False}, 'seed': 2, 'checkpoint': 'pre.pt'}
    assert run_ablation_cell.name == 'worker.run_ablation_cell'


def test_self_check_task():
    results = self_check.apply(kwargs={'corrupt_grl': True}).get()
    assert results['grl_gradient']['passed'] is False
    assert results['modulation_identity']['passed'] is True
