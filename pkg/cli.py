"""
DCDNet Command Line
Dataset export, the three training phases, evaluation, the ablation suite
and the numerical self-checks
"""

import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional

import pandas as pd
from dotenv import load_dotenv

from models import ConfigError, DCDNetError, DomainSpec, MissingArtifactError, RunConfig
from utils.artifacts import RunDirectory
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.config import load_run_config
from utils.log import banner, setup_logging
from utils.runtime import resolve_device, seed_everything

logger = logging.getLogger('cli')

EXIT_OK = 0
EXIT_CHECK_FAILED = 4


# =============================================================================
# HELPERS
# =============================================================================

def _domains(cfg: RunConfig) -> List[DomainSpec]:
    from services.data_synth import domains_from_config
    return domains_from_config(cfg)


def _targets(cfg: RunConfig) -> List[DomainSpec]:
    targets = _domains(cfg)[1:]
    if not cfg.domains:
        return targets
    known = {d.domain_id for d in targets}
    unknown = sorted(set(cfg.domains) - known)
    if unknown:
        raise ConfigError(f"unknown target domain(s) {unknown}, available {sorted(known)}")
    return [d for d in targets if d.domain_id in cfg.domains]


def _require_checkpoint(path: Optional[str]) -> dict:
    if not path:
        raise MissingArtifactError("this command needs --checkpoint")
    return load_checkpoint(path)


def _print_table(title: str, frame: pd.DataFrame):
    print(f"\n{title}\n")
    print(frame.to_markdown(index=False, floatfmt='.4f'))
    print(flush=True)


def _pretrain(cfg: RunConfig, run: RunDirectory, device, name: str = 'pretrain.pt'):
    from services.data_synth import episode_source
    from services.network import build_network
    from services.trainer import pretrain_baseline

    net = build_network(cfg, device)
    result = pretrain_baseline(net, cfg, episode_source(_domains(cfg)[0], cfg), device, run.file(name))
    return net, result


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_export(args, cfg: RunConfig) -> int:
    from services.data_synth import export_domain

    with RunDirectory(cfg) as run:
        for domain in _domains(cfg):
            export_domain(domain, run.file('data'), args.scenes_per_class, cfg.seed, cfg.image_size)
        run.write_json({'data_dir': str(run.file('data')), 'scenes_per_class': args.scenes_per_class})
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    seed_everything(cfg.seed)
    device = resolve_device(cfg.device)
    with RunDirectory(cfg) as run:
        _, result = _pretrain(cfg, run, device)
        run.write_csv(result.metrics, 'metrics.csv')
        final = result.metrics.iloc[-1].to_dict() if len(result.metrics) else {}
        run.write_json({'phase': 'pretrain', 'seed': cfg.seed, 'final': final})
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from services.charts import loss_curves
    from services.data_synth import episode_source
    from services.trainer import network_from_checkpoint, train_dcdnet

    seed_everything(cfg.seed)
    device = resolve_device(cfg.device)
    with RunDirectory(cfg) as run:
        if args.from_scratch:
            net, pretrained = _pretrain(cfg, run, device)
            run.write_csv(pretrained.metrics, 'pretrain_metrics.csv')
        else:
            net = network_from_checkpoint(cfg, _require_checkpoint(args.checkpoint), device)

        result = train_dcdnet(net, cfg, episode_source(_domains(cfg)[0], cfg), device,
                              checkpoint_path=run.file('dcdnet.pt'), weights_dir=run.file('fusion'))
        if cfg.epochs == 0:
            save_checkpoint(run.file('dcdnet.pt'), net, 'train', cfg.model_dump())
        run.write_csv(result.metrics, 'metrics.csv')
        if len(result.metrics):
            loss_curves(result.metrics, run.file('losses.html'))
        run.write_json({
            'phase': 'train',
            'seed': cfg.seed,
            'updates': {'main': result.update_log.count('main'), 'disc': result.update_log.count('disc')},
            'final': result.metrics.iloc[-1].to_dict() if len(result.metrics) else {},
        })
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    from services.data_synth import episode_source
    from services.trainer import target_protocol

    payload = _require_checkpoint(args.checkpoint)
    seed_everything(cfg.seed)
    device = resolve_device(cfg.device)
    with RunDirectory(cfg) as run:
        rows, episodes, curves = [], [], []
        for domain in _targets(cfg):
            for k in cfg.shots:
                result = target_protocol(cfg, payload, episode_source(domain, cfg), domain, k, device,
                                         run.file(f"finetuned_d{domain.domain_id}_k{k}.pt"))
                rows.append({key: result[key] for key in ('domain_id', 'k_shots', 'miou_before', 'miou_after',
                                                          'query_mask_accesses')})
                episodes.append(result['episodes'])
                curves.append(result['finetune'].assign(k_shots=k))
        table = pd.DataFrame(rows)
        run.write_csv(table, 'domains.csv')
        run.write_csv(pd.concat(episodes, ignore_index=True), 'episodes.csv')
        run.write_csv(pd.concat(curves, ignore_index=True), 'finetune_metrics.csv')
        run.write_json({'phase': 'finetune', 'seed': cfg.seed, 'domains': rows})
    _print_table('Target mIoU before / after fine-tuning', table)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    from services.charts import domain_miou
    from services.data_synth import episode_source
    from services.trainer import eval_episodes, evaluate, network_from_checkpoint

    payload = _require_checkpoint(args.checkpoint) if args.checkpoint else None
    seed_everything(cfg.seed)
    device = resolve_device(cfg.device)
    with RunDirectory(cfg) as run:
        net = network_from_checkpoint(cfg, payload, device)
        export_dir = run.file('predictions') if args.export_masks else None
        if export_dir is not None:
            export_dir.mkdir(parents=True, exist_ok=True)
        rows, episodes = [], []
        for domain in _targets(cfg):
            source = episode_source(domain, cfg)
            for k in cfg.shots:
                result = evaluate(net, eval_episodes(source, domain, cfg, k), device, cfg.batch_size, export_dir)
                rows.append({'domain_id': domain.domain_id, 'k_shots': k, 'miou': result.miou})
                episodes.append(result.episodes)
        table = pd.DataFrame(rows)
        run.write_csv(table, 'domains.csv')
        run.write_csv(pd.concat(episodes, ignore_index=True), 'episodes.csv')
        domain_miou(table, run.file('miou.html'))
        run.write_json({'phase': 'eval', 'seed': cfg.seed, 'checkpoint': args.checkpoint, 'domains': rows})

    wide = table.pivot(index='domain_id', columns='k_shots', values='miou')
    wide.columns = [f"{k}-shot" for k in wide.columns]
    _print_table('Per-domain mIoU', wide.reset_index())
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    from services.ablation import run_ablation_suite
    from services.charts import ablation_bars
    from services.pdf_export import PDFExporter
    from worker import dispatch_cell

    if not args.from_scratch:
        _require_checkpoint(args.checkpoint)
    device = resolve_device(cfg.device)
    with RunDirectory(cfg) as run:
        checkpoints: Dict[int, str] = {}
        for seed in cfg.ablation_seeds:
            if args.from_scratch:
                seed_cfg = cfg.model_copy(update={'seed': seed})
                seed_everything(seed)
                _pretrain(seed_cfg, run, device, name=f"pretrain_seed{seed}.pt")
                checkpoints[seed] = str(run.file(f"pretrain_seed{seed}.pt"))
            else:
                checkpoints[seed] = str(args.checkpoint)

        report = run_ablation_suite(cfg, checkpoints, dispatch_cell(queued=args.queue))
        run.write_csv(report.table, 'ablation.csv')
        run.write_markdown(report.markdown(), 'ablation.md')
        ablation_bars(report.table, run.file('ablation.html'))
        pdf = PDFExporter().generate_report(report.tables(), {
            'Seeds': ','.join(str(s) for s in cfg.ablation_seeds),
            'Image size': str(cfg.image_size),
            'Epochs (source / fine-tune)': f"{cfg.epochs} / {cfg.finetune_epochs}",
        })
        run.file('ablation.pdf').write_bytes(pdf)
        run.write_json({'phase': 'ablate', 'cells': report.cells}, 'cells.json')
    print(report.markdown(), flush=True)
    return EXIT_OK


def cmd_check(args, cfg: RunConfig) -> int:
    from services.checks import run_checks

    banner(logger, 'check', 'start', corrupt_grl=args.corrupt_grl)
    results = run_checks(corrupt_grl=args.corrupt_grl)
    for result in results:
        print(f"{'PASS' if result.passed else 'FAIL'}  {result.name:<24} {result.detail}", flush=True)
    failed = [r.name for r in results if not r.passed]
    banner(logger, 'check', 'complete', failed=len(failed))
    return EXIT_CHECK_FAILED if failed else EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    'export': cmd_export,
    'pretrain': cmd_pretrain,
    'train': cmd_train,
    'finetune': cmd_finetune,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
    'check': cmd_check,
}


# =============================================================================
# ENTRY POINT
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='key=value run file')
    common.add_argument('--seed', type=int)
    common.add_argument('--shots', help='shot counts, e.g. 1,5')
    common.add_argument('--domains', help='target domain ids, e.g. 1,2,3')
    common.add_argument('--out', help='output root directory')
    common.add_argument('--override', action='append', default=[], metavar='KEY=VALUE')

    parser = argparse.ArgumentParser(prog='dcdnet', description='Cross-domain few-shot segmentation (DCDNet)')
    sub = parser.add_subparsers(dest='command', required=True)

    export = sub.add_parser('export', parents=[common], help='write synthetic domains to disk')
    export.add_argument('--scenes-per-class', type=int, default=20)

    sub.add_parser('pretrain', parents=[common], help='episodic baseline pretraining')

    train = sub.add_parser('train', parents=[common], help='DCDNet source training')
    start = train.add_mutually_exclusive_group(required=True)
    start.add_argument('--checkpoint')
    start.add_argument('--from-scratch', action='store_true')

    finetune = sub.add_parser('finetune', parents=[common], help='support-only target fine-tuning')
    finetune.add_argument('--checkpoint')

    evaluate = sub.add_parser('eval', parents=[common], help='per-domain mIoU')
    evaluate.add_argument('--checkpoint')
    evaluate.add_argument('--export-masks', action='store_true')

    ablate = sub.add_parser('ablate', parents=[common], help='module/feature/loss ablation suite')
    source = ablate.add_mutually_exclusive_group(required=True)
    source.add_argument('--checkpoint')
    source.add_argument('--from-scratch', action='store_true')
    ablate.add_argument('--queue', action='store_true', help='dispatch cells to a running Celery worker')

    check = sub.add_parser('check', parents=[common], help='numerical invariant suite')
    check.add_argument('--corrupt-grl', action='store_true', help=argparse.SUPPRESS)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.override, seed=args.seed, shots=args.shots,
                              domains=args.domains, out_dir=args.out)
        return COMMANDS[args.command](args, cfg)
    except DCDNetError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
