"""Unit tests for the bounded task manager."""

import threading
import time

import pytest

from utils.async_helpers import TaskManager


class TestTaskManager:
    """Tests for TaskManager."""

    def test_rejects_zero_jobs(self):
        """At least one job is required."""
        with pytest.raises(ValueError):
            TaskManager(0)

    @pytest.mark.parametrize("jobs", [1, 3])
    def test_results_in_submission_order(self, jobs):
        """Results follow submission order whatever the completion order."""

        def task(i: int):
            def run() -> int:
                time.sleep(0.01 * (5 - i))
                return i * i

            return run

        results = TaskManager(jobs).run_all([(f"t{i}", task(i)) for i in range(5)])
        assert results == [0, 1, 4, 9, 16]

    def test_concurrency_bounded(self):
        """No more than ``jobs`` tasks run at once."""
        manager = TaskManager(2)
        peak = []
        lock = threading.Lock()

        def run() -> None:
            with lock:
                peak.append(manager.get_active_task_count())
            time.sleep(0.02)

        manager.run_all([(f"t{i}", run) for i in range(6)])
        assert max(peak) <= 2
        assert manager.get_active_task_count() == 0

    def test_first_failure_raised(self):
        """A failing task surfaces after the pool drains."""
        finished = []

        def ok() -> None:
            time.sleep(0.01)
            finished.append(True)

        def fail() -> None:
            raise RuntimeError("fit failed")

        with pytest.raises(RuntimeError, match="fit failed"):
            TaskManager(2).run_all([("a", fail), ("b", ok), ("c", ok)])
        assert len(finished) == 2

    def test_empty(self):
        """No tasks, no results."""
        assert TaskManager(4).run_all([]) == []
