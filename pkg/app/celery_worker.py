"""
Celery worker configuration for sweep solves.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Sequence, Tuple
import logging

from celery import Celery, group

from app.core.config import settings
from app.core.exceptions import LabError
from app.schemas.config import RunConfig

logger = logging.getLogger(__name__)

# Create Celery app
celery_app = Celery(
    "balanced_lab",
    broker=settings.CELERY_BROKER_URL,
    backend=settings.CELERY_RESULT_BACKEND,
)

# Configure Celery
celery_app.conf.update(
    task_serializer="json",
    accept_content=["json"],
    result_serializer="json",
    timezone="UTC",
    enable_utc=True,
    task_track_started=True,
    task_time_limit=60 * 60,  # 1 hour
    task_soft_time_limit=55 * 60,
    worker_prefetch_multiplier=1,
    worker_max_tasks_per_child=50,
)


def _service(config: Dict[str, Any]):
    from app.services.run_service import RunService

    return RunService(RunConfig(**config))


@celery_app.task(name="solve_geodesic_for_epsilon")
def solve_geodesic_for_epsilon(config: Dict[str, Any], epsilon: float):
    """
    Solve one member of an ε-sweep and return its estimate row.
    """
    try:
        estimate = _service(config).sweep_entry(epsilon)
        return {"success": True, "epsilon": epsilon, "estimate": estimate}
    except LabError as e:
        logger.error(f"Sweep solve at epsilon = {epsilon} failed: {e.message}")
        return {"success": False, "epsilon": epsilon, "error": e.to_dict()}


@celery_app.task(name="solve_cy_for_amplitude")
def solve_cy_for_amplitude(config: Dict[str, Any], amplitude: float):
    """
    Solve the Calabi-Yau problem with ψ scaled by ``amplitude``.
    """
    try:
        row = _service(config).cy_sweep_entry(amplitude)
        return {"success": True, "amplitude": amplitude, "row": row}
    except LabError as e:
        logger.error(f"C0 sweep solve at amplitude = {amplitude} failed: {e.message}")
        return {"success": False, "amplitude": amplitude, "error": e.to_dict()}


def run_sweep(task, arguments: Sequence[Tuple[Any, ...]], threads: int = 1) -> List[Dict[str, Any]]:
    """Run ``task`` once per argument tuple; results come back in argument order."""
    backend = settings.SWEEP_BACKEND
    logger.info(f"Dispatching {len(arguments)} {task.name} tasks via {backend}")
    if backend == "celery":
        return group(task.s(*args) for args in arguments).apply_async().get()
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(lambda args: task.apply(args=args).get(), arguments))
