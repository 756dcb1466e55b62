"""Summary tables built from the per-iteration CSV files of a run directory."""

from pathlib import Path
from typing import Any, Mapping, Sequence

from core.config import ReportConfig, config
from core.error_handler import DataError, ParameterError, UndefinedMetricError
from core.experiment import (
    RUN_MANIFEST,
    completed_iterations,
    iteration_dir,
    read_csv,
    read_json,
    summary_rpis,
    write_csv,
)
from core.metrics import TaskEvaluation, arpi, bootstrap_slope_confidence, error_trend, yearly_means
from utils.logger import get_logger

logger = get_logger(__name__)

TABLES_DIR = "tables"
TREND_FIELDS = [
    "iteration",
    "task",
    "period",
    "mean_l2",
    "slope",
    "relative_increase",
    "slope_confidence",
]


def _task_row(
    prefix: Mapping[str, Any], per_task: Mapping[str, float], tasks: Sequence[str]
) -> dict[str, Any]:
    row = dict(prefix)
    for task in tasks:
        row[task] = repr(per_task[task])
    row["ARPI"] = repr(arpi([per_task[task] for task in tasks]))
    return row


def evaluation_table(
    prefix: Mapping[str, Any], evaluations: Mapping[str, TaskEvaluation]
) -> dict[str, Any]:
    """One row: ``prefix`` columns, then RPI per task and their ARPI."""
    return _task_row(prefix, {task: e.rpi for task, e in evaluations.items()}, list(evaluations))


def rpi_rows(run_dir: Path, iterations: Sequence[int]) -> tuple[list[str], list[dict[str, Any]]]:
    """Per-task RPI of the distilled edge and of the teacher, one row per iteration each."""
    rows = []
    tasks: list[str] = []
    for k in iterations:
        for predictor, name in (("distilled", "report.csv"), ("teacher", "teacher.csv")):
            per_task, _ = summary_rpis(read_csv(iteration_dir(run_dir, k) / name))
            tasks = tasks or list(per_task)
            rows.append(_task_row({"iteration": k, "predictor": predictor}, per_task, tasks))
    return tasks, rows


def arpi_rows(rpi_table: Sequence[Mapping[str, Any]]) -> list[dict[str, Any]]:
    by_iteration: dict[int, dict[str, Any]] = {}
    for row in rpi_table:
        entry = by_iteration.setdefault(row["iteration"], {"iteration": row["iteration"]})
        entry[f"{row['predictor']}_arpi"] = row["ARPI"]
    return [by_iteration[k] for k in sorted(by_iteration)]


def trend_rows(
    run_dir: Path, iterations: Sequence[int], report: ReportConfig
) -> list[dict[str, Any]]:
    """Yearly mean L2 of each distilled edge over the post-training months, with its trend."""
    rows = []
    for k in iterations:
        series: dict[str, list[tuple[str, float]]] = {}
        for row in read_csv(iteration_dir(run_dir, k) / "errors.csv"):
            series.setdefault(row["task"], []).append((row["timestamp"], float(row["l2"])))
        for task, points in series.items():
            points.sort()
            timestamps = [t for t, _ in points]
            values = [v for _, v in points]
            trend: dict[str, Any] = {"slope": "", "relative_increase": "", "slope_confidence": ""}
            try:
                fit = error_trend(
                    values,
                    smoothing_window=report.smoothing_window,
                    min_points=report.trend_min_points,
                )
                trend = {
                    "slope": repr(fit.slope),
                    "relative_increase": repr(fit.relative_increase),
                    "slope_confidence": repr(
                        bootstrap_slope_confidence(values, report.bootstrap_resamples)
                    ),
                }
            except (ParameterError, UndefinedMetricError) as e:
                logger.warning(f"No error trend for {task} at iteration {k}: {e}")
            for index, mean in enumerate(yearly_means(values)):
                chunk = timestamps[index * 12 : (index + 1) * 12]
                rows.append(
                    {
                        "iteration": k,
                        "task": task,
                        "period": f"{chunk[0]}..{chunk[-1]}",
                        "mean_l2": repr(mean),
                        **trend,
                    }
                )
    return rows


def consistency_rows(run_dir: Path, iterations: Sequence[int]) -> list[dict[str, Any]]:
    rows = []
    for k in iterations:
        for row in read_csv(iteration_dir(run_dir, k) / "consistency.csv"):
            rows.append(
                {
                    "iteration": k,
                    "task": row["task"],
                    "predictor": row["predictor"],
                    "mean_variance": row["mean_variance"],
                    "inverse": row["inverse"],
                }
            )
    return rows


def write_report_tables(run_dir: Path, report: ReportConfig = config.report) -> list[Path]:
    """
    Write the four summary tables under ``<run_dir>/tables``.

    Raises:
        DataError: If run.json or a per-iteration table is missing
    """
    run_dir = Path(run_dir)
    read_json(run_dir / RUN_MANIFEST)
    iterations = completed_iterations(run_dir)
    if not iterations:
        missing = iteration_dir(run_dir, 1) / "report.csv"
        raise DataError("run has no completed iteration", path=missing)

    tables = run_dir / TABLES_DIR
    tasks, rpi_table = rpi_rows(run_dir, iterations)
    written = [
        (tables / "rpi_per_task.csv", ["iteration", "predictor", *tasks, "ARPI"], rpi_table),
        (
            tables / "arpi_vs_iteration.csv",
            ["iteration", "distilled_arpi", "teacher_arpi"],
            arpi_rows(rpi_table),
        ),
        (tables / "error_trend.csv", TREND_FIELDS, trend_rows(run_dir, iterations, report)),
        (
            tables / "consistency.csv",
            ["iteration", "task", "predictor", "mean_variance", "inverse"],
            consistency_rows(run_dir, iterations),
        ),
    ]
    for path, fields, rows in written:
        write_csv(path, fields, rows)
    logger.info(f"Wrote {len(written)} report tables for iterations {iterations} to {tables}")
    return [path for path, _, _ in written]
