"""
Celery Worker
Runs ablation cells and the numerical self-check suite as queued tasks
"""

import logging
import os
import sys

from celery import Celery

from utils.log import LOG_FORMAT

logging.basicConfig(
    level=logging.INFO,
    format=LOG_FORMAT,
    handlers=[logging.StreamHandler(sys.stdout)]
)
logger = logging.getLogger('worker')

REDIS_URL = os.getenv('REDIS_URL', 'redis://localhost:6379/0')

celery_app = Celery(
    'worker',
    broker=REDIS_URL,
    backend=REDIS_URL
)

celery_app.conf.update(
    task_serializer='json',
    accept_content=['json'],
    result_serializer='json',
    enable_utc=True,
    task_track_started=True,
    task_time_limit=6 * 3600,
    task_soft_time_limit=6 * 3600 - 300,
    task_acks_late=True,
    worker_prefetch_multiplier=1,
    worker_log_format=LOG_FORMAT,
    worker_task_log_format='%(asctime)s [%(levelname)s] %(task_name)s[%(task_id)s]: %(message)s',
)


@celery_app.task(bind=True, name='worker.run_ablation_cell')
def run_ablation_cell(self, config: dict, switches: dict, seed: int, checkpoint: str) -> dict:
    """
    Train and score one (switches, seed) cell of the ablation suite
    """
    logger.info(f"=== CELL START === seed={seed} task={self.request.id}")
    logger.info(f"[{seed}] switches: {switches}")

    # torch loads on first task
    from services.ablation import run_cell

    try:
        result = run_cell(config, switches, seed, checkpoint)
    except Exception as e:
        logger.error(f"[{seed}] Cell failed: {type(e).__name__}: {e}")
        raise
    logger.info(f"=== CELL COMPLETE === seed={seed} miou={result['miou']:.4f}")
    return result


@celery_app.task(bind=True, name='worker.self_check')
def self_check(self, corrupt_grl: bool = False) -> dict:
    """Numerical invariant suite; returns pass/fail per check"""
    logger.info(f"=== SELF CHECK START === task={self.request.id}")

    from services.checks import run_checks

    results = run_checks(corrupt_grl=corrupt_grl)
    failed = [r.name for r in results if not r.passed]
    logger.info(f"=== SELF CHECK COMPLETE === passed={len(results) - len(failed)} failed={failed}")
    return {r.name: {'passed': r.passed, 'detail': r.detail} for r in results}


def dispatch_cell(queued: bool = False):
    """Cell runner for the ablation harness: in-process apply(), or delay() to a running worker"""

    def runner(config: dict, switches: dict, seed: int, checkpoint: str) -> dict:
        if queued:
            return run_ablation_cell.delay(config, switches, seed, checkpoint).get()
        return run_ablation_cell.apply(args=(config, switches, seed, checkpoint)).get()

    return runner
