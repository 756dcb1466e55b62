"""Bounded worker pool for independent fits within a pipeline stage."""

import threading
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

from utils.logger import get_logger

logger = get_logger(__name__)

R = TypeVar("R")


class TaskManager:
    """
    Runs keyed tasks with at most ``jobs`` in flight.

    Results come back in submission order whatever the completion order, so a stage run
    with one job and with many produces the same sequence.
    """

    def __init__(self, jobs: int = 1):
        """
        Initialize task manager.

        Args:
            jobs: Maximum number of concurrent tasks; 1 runs every task inline
        """
        if jobs < 1:
            raise ValueError(f"jobs must be >= 1, got {jobs}")
        self.jobs = jobs
        self.active_tasks: set[str] = set()
        self._lock = threading.Lock()

    def _track(self, task_id: str, fn: Callable[[], R]) -> R:
        with self._lock:
            self.active_tasks.add(task_id)
        try:
            return fn()
        except Exception:
            logger.error(f"Task {task_id} failed")
            raise
        finally:
            with self._lock:
                self.active_tasks.discard(task_id)

    def run_all(self, tasks: Sequence[tuple[str, Callable[[], R]]]) -> list[R]:
        """
        Execute every task and return the results in submission order.

        Args:
            tasks: (task_id, zero-argument callable) pairs

        Returns:
            One result per task

        Raises:
            Exception: The first failure in submission order, after the pool has drained
        """
        if self.jobs == 1 or len(tasks) <= 1:
            return [self._track(task_id, fn) for task_id, fn in tasks]

        with ThreadPoolExecutor(max_workers=self.jobs, thread_name_prefix="fit") as pool:
            futures: list[Future[R]] = [
                pool.submit(self._track, task_id, fn) for task_id, fn in tasks
            ]
        # The context manager waits for completion; surface failures in order.
        return [future.result() for future in futures]

    def get_active_task_count(self) -> int:
        with self._lock:
            return len(self.active_tasks)
