"""
Ablation Harness
Module, feature and loss ablation tables; each cell is the seed-averaged
target mIoU after source training and support-only fine-tuning
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

import pandas as pd

from models import AblationSwitches, RunConfig
from services.data_synth import domains_from_config, episode_source
from services.trainer import network_from_checkpoint, target_protocol, train_dcdnet
from utils.checkpoint import load_checkpoint, snapshot
from utils.log import banner
from utils.runtime import resolve_device, seed_everything

logger = logging.getLogger(__name__)

CellRunner = Callable[[Dict[str, Any], Dict[str, bool], int, str], Dict[str, Any]]


@dataclass(frozen=True)
class AblationRow:
    table: str
    label: str
    switches: Tuple[Tuple[str, bool], ...]
    reference: float   # full-scale published mIoU of the matching configuration

    @property
    def switch_dict(self) -> Dict[str, bool]:
        return dict(self.switches)


def _switches(**changes) -> Tuple[Tuple[str, bool], ...]:
    values = AblationSwitches().model_dump()
    values.update(changes)
    AblationSwitches(**values)
    return tuple(sorted(values.items()))


def ablation_rows() -> List[AblationRow]:
    no_acfd = dict(use_acfd=False, use_adv=False, use_cont=False, use_ortho=False)
    return [
        AblationRow('module', 'baseline', _switches(use_mgdf=False, use_cam=False, **no_acfd), 80.1),
        AblationRow('module', '+MGDF', _switches(use_cam=False, **no_acfd), 80.6),
        AblationRow('module', '+MGDF+ACFD', _switches(use_cam=False), 81.3),
        AblationRow('module', '+MGDF+ACFD+CAM', _switches(), 81.7),
        AblationRow('feature', 'base', _switches(use_private=False, use_shared=False), 80.6),
        AblationRow('feature', 'private+shared', _switches(use_base=False), 81.4),
        AblationRow('feature', 'base+private+shared', _switches(), 81.7),
        AblationRow('loss', 'bce', _switches(use_adv=False, use_cont=False, use_ortho=False), 80.6),
        AblationRow('loss', 'bce+adv', _switches(use_cont=False, use_ortho=False), 81.0),
        AblationRow('loss', 'bce+cont', _switches(use_adv=False, use_ortho=False), 81.1),
        AblationRow('loss', 'bce+adv+cont', _switches(use_ortho=False), 81.5),
        AblationRow('loss', 'bce+adv+cont+ortho', _switches(), 81.7),
    ]


def run_cell(config: Dict[str, Any], switches: Dict[str, bool], seed: int, checkpoint: str) -> Dict[str, Any]:
    """
    Train one switch configuration from a pretrained checkpoint and score it on
    every target domain after fine-tuning

    Returns:
        JSON-serializable result with the per-domain and mean target mIoU
    """
    cfg = RunConfig(**{**config, **switches, 'seed': seed})
    seed_everything(seed)
    device = resolve_device(cfg.device)
    payload = load_checkpoint(checkpoint)
    net = network_from_checkpoint(cfg, payload, device)
    domains = domains_from_config(cfg)
    train_dcdnet(net, cfg, episode_source(domains[0], cfg), device)
    trained = snapshot(net, 'train', cfg.model_dump())

    per_domain = {}
    for domain in domains[1:]:
        if cfg.domains and domain.domain_id not in cfg.domains:
            continue
        result = target_protocol(cfg, trained, episode_source(domain, cfg), domain, cfg.k_shots, device)
        per_domain[str(domain.domain_id)] = result['miou_after']
    mean = sum(per_domain.values()) / len(per_domain) if per_domain else 0.0
    return {'seed': seed, 'switches': switches, 'per_domain': per_domain, 'miou': mean}


@dataclass
class AblationReport:
    table: pd.DataFrame
    cells: List[Dict[str, Any]]

    def tables(self) -> Dict[str, pd.DataFrame]:
        return {name: frame.drop(columns='table').reset_index(drop=True)
                for name, frame in self.table.groupby('table', sort=False)}

    def markdown(self) -> str:
        titles = {'module': 'Module ablation', 'feature': 'Feature ablation', 'loss': 'Loss ablation'}
        parts = []
        for name, frame in self.tables().items():
            parts.append(f"## {titles.get(name, name)}\n\n{frame.to_markdown(index=False, floatfmt='.4f')}\n")
        return '\n'.join(parts)


def run_ablation_suite(cfg: RunConfig, checkpoints: Dict[int, str], runner: Optional[CellRunner] = None
                       ) -> AblationReport:
    """
    Every distinct switch set is run once per seed; rows sharing a switch set
    share their cells. Cell results are averaged per row, independent of order.

    Args:
        cfg: Base run config (switch values in it are ignored)
        checkpoints: Pretrained checkpoint path per ablation seed
        runner: Cell executor, in-process by default
    """
    runner = runner or run_cell
    rows = ablation_rows()
    distinct = sorted({row.switches for row in rows})
    base = cfg.model_dump(exclude=set(AblationSwitches.model_fields))
    banner(logger, 'ablate', 'start', configurations=len(distinct), seeds=cfg.ablation_seeds)

    results: Dict[Tuple[Tuple[Tuple[str, bool], ...], int], Dict[str, Any]] = {}
    for index, switches in enumerate(distinct):
        for seed in cfg.ablation_seeds:
            logger.info(f"[cell {index + 1}/{len(distinct)} seed {seed}] {dict(switches)}")
            results[(switches, seed)] = runner(base, dict(switches), seed, str(checkpoints[seed]))

    records = []
    for row in rows:
        scores = sorted(results[(row.switches, seed)]['miou'] for seed in cfg.ablation_seeds)
        records.append({
            'table': row.table,
            'configuration': row.label,
            'seeds': ','.join(str(s) for s in cfg.ablation_seeds),
            'miou': 100.0 * sum(scores) / len(scores),
            'reference_full_scale': row.reference,
        })
    banner(logger, 'ablate', 'complete', cells=len(results))
    return AblationReport(table=pd.DataFrame(records), cells=[results[key] for key in sorted(results)])
