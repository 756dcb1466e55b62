"""Evaluation metrics: RPI, ARPI, temporal consistency and error-trend analysis."""

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from core.error_handler import ParameterError, UndefinedMetricError
from core.grid import LayerGrid, masked_l2
from utils.logger import get_logger
from utils.seeding import numpy_rng

logger = get_logger(__name__)


def rpi(pred_l2: float, baseline_l2: float) -> float:
    """
    Relative performance improvement in percent: (baseline / pred - 1) * 100.

    Raises:
        UndefinedMetricError: If either score is not a positive finite number
    """
    for name, value in (("pred_l2", pred_l2), ("baseline_l2", baseline_l2)):
        if not math.isfinite(value) or value <= 0:
            raise UndefinedMetricError(f"RPI needs positive L2 scores, got {name}={value}")
    return (baseline_l2 / pred_l2 - 1.0) * 100.0


def arpi(task_rpis: Sequence[float]) -> float:
    """
    Average RPI over tasks.

    Raises:
        ParameterError: If the list is empty
    """
    if len(task_rpis) == 0:
        raise ParameterError("ARPI needs at least one task RPI")
    return float(np.mean(np.asarray(task_rpis, dtype=np.float64)))


def per_timestamp_l2(
    predictions: Mapping[str, LayerGrid], truths: Mapping[str, LayerGrid]
) -> dict[str, float]:
    """Masked L2 per timestamp present in both maps; timestamps with no valid truth are skipped."""
    scores: dict[str, float] = {}
    for timestamp in sorted(set(predictions) & set(truths)):
        try:
            scores[timestamp] = masked_l2(predictions[timestamp], truths[timestamp])
        except UndefinedMetricError:
            logger.debug(f"No valid ground truth at {timestamp}; skipped")
    return scores


@dataclass
class TaskEvaluation:
    """Per-task test scores against a baseline.

    Attributes:
        task: Output node name
        timestamps: Evaluated timestamps
        l2: Masked L2 of the evaluated predictor per timestamp
        baseline_l2: Masked L2 of the baseline per timestamp
        rpi: RPI of the mean per-timestamp L2 scores, in percent
    """

    task: str
    timestamps: list[str]
    l2: list[float]
    baseline_l2: list[float]
    rpi: float

    @property
    def mean_l2(self) -> float:
        return float(np.mean(self.l2))

    @property
    def mean_baseline_l2(self) -> float:
        return float(np.mean(self.baseline_l2))

    @classmethod
    def from_series(
        cls,
        task: str,
        l2: Mapping[str, float],
        baseline_l2: Mapping[str, float],
    ) -> "TaskEvaluation":
        """
        Build an evaluation over the timestamps scored for both predictors.

        Raises:
            UndefinedMetricError: If no timestamp is shared or an aggregate is not positive
        """
        timestamps = sorted(set(l2) & set(baseline_l2))
        if not timestamps:
            raise UndefinedMetricError(f"no common evaluation timestamp for task {task}")
        pred = [l2[t] for t in timestamps]
        base = [baseline_l2[t] for t in timestamps]
        return cls(
            task=task,
            timestamps=timestamps,
            l2=pred,
            baseline_l2=base,
            rpi=rpi(float(np.mean(pred)), float(np.mean(base))),
        )


@dataclass(frozen=True)
class ConsistencyReport:
    """Mean temporal variance of a prediction series (lower is more consistent)."""

    task: str
    window: int
    mean_variance: float
    pairs: int

    @property
    def inverse(self) -> float:
        return math.inf if self.mean_variance == 0 else 1.0 / self.mean_variance


def temporal_consistency(
    predictions: Sequence[LayerGrid], window: int = 3, task: str = ""
) -> ConsistencyReport:
    """
    Average population variance over every (cell, window center) pair.

    Only cells valid at every timestamp of a window contribute to that window.

    Args:
        predictions: Time-ordered prediction grids
        window: Odd window length in timestamps
        task: Task label carried into the report

    Raises:
        ParameterError: If the window is even or not positive, or the series is shorter than it
        UndefinedMetricError: If no cell is valid across any window
    """
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"consistency window must be odd and positive, got {window}")
    if len(predictions) < window:
        raise ParameterError(
            f"series of {len(predictions)} predictions is shorter than the window {window}"
        )

    values = np.stack([grid.values for grid in predictions])
    masks = np.stack([grid.mask for grid in predictions])
    total = 0.0
    pairs = 0
    for start in range(len(predictions) - window + 1):
        block = values[start : start + window]
        valid = masks[start : start + window].all(axis=0)
        if not valid.any():
            continue
        variance = block[:, valid].var(axis=0)
        total += float(variance.sum())
        pairs += int(valid.sum())
    if pairs == 0:
        raise UndefinedMetricError("no cell is valid across any consistency window")
    return ConsistencyReport(task=task, window=window, mean_variance=total / pairs, pairs=pairs)


@dataclass
class TrendReport:
    """Linear trend of a monthly error series.

    Attributes:
        slope: Least-squares slope per step of the raw series
        intercept: Fitted value at step 0
        smoothed: Moving average over ``smoothing_window`` steps
        smoothed_slope: Least-squares slope of the smoothed series
        smoothed_intercept: Its fitted value at raw step 0 (windows placed at their centers)
        relative_increase: Smoothed fit at end / smoothed fit at start - 1, in percent
        start: Anchor step of the relative increase
        end: Second anchor step
    """

    slope: float
    intercept: float
    smoothed: list[float] = field(default_factory=list)
    smoothed_slope: float = 0.0
    smoothed_intercept: float = 0.0
    relative_increase: float = 0.0
    start: int = 0
    end: int = 0

    def fitted(self, step: float) -> float:
        return self.intercept + self.slope * step

    def smoothed_fitted(self, step: float) -> float:
        return self.smoothed_intercept + self.smoothed_slope * step


def linear_fit(series: Sequence[float]) -> tuple[float, float]:
    """Least-squares (slope, intercept) of the series against its step index."""
    y = np.asarray(series, dtype=np.float64)
    t = np.arange(len(y), dtype=np.float64)
    design = np.column_stack([t, np.ones_like(t)])
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(slope), float(intercept)


def moving_average(series: Sequence[float], window: int) -> list[float]:
    y = np.asarray(series, dtype=np.float64)
    if window < 1:
        raise ParameterError(f"smoothing window must be positive, got {window}")
    if len(y) < window:
        return []
    return np.convolve(y, np.ones(window) / window, mode="valid").tolist()


def error_trend(
    monthly_l2: Sequence[float],
    smoothing_window: int = 12,
    start: int = 0,
    end: int | None = None,
    min_points: int = 24,
) -> TrendReport:
    """
    Fit a linear trend to a monthly L2 series.

    The slope is the least-squares slope of the raw series. The relative increase comes
    from a line fitted to the moving average instead, so a seasonal cycle cut at arbitrary
    months does not tilt it. Without two smoothed points it falls back to the raw fit.

    Args:
        monthly_l2: One error value per month, time-ordered
        smoothing_window: Moving-average length in months
        start: First anchor step of the relative increase
        end: Second anchor step (defaults to the last step)
        min_points: Shortest series accepted

    Raises:
        ParameterError: If the series is too short or the anchors are out of range
        UndefinedMetricError: If the fitted value at ``start`` is not positive
    """
    n = len(monthly_l2)
    if n < min_points:
        raise ParameterError(f"error trend needs at least {min_points} points, got {n}")
    end = n - 1 if end is None else end
    if not 0 <= start < n or not 0 <= end < n:
        raise ParameterError(f"trend anchors ({start}, {end}) outside 0..{n - 1}")

    slope, intercept = linear_fit(monthly_l2)
    smoothed = moving_average(monthly_l2, smoothing_window)
    if len(smoothed) >= 2:
        smoothed_slope, smoothed_intercept = linear_fit(smoothed)
        # Window j averages steps j .. j + w - 1; place it at its center.
        smoothed_intercept -= smoothed_slope * (smoothing_window - 1) / 2.0
    else:
        smoothed_slope, smoothed_intercept = slope, intercept
    report = TrendReport(
        slope=slope,
        intercept=intercept,
        smoothed=smoothed,
        smoothed_slope=smoothed_slope,
        smoothed_intercept=smoothed_intercept,
        start=start,
        end=end,
    )
    base = report.smoothed_fitted(start)
    if base <= 0:
        raise UndefinedMetricError(f"fitted error at step {start} is not positive ({base})")
    report.relative_increase = (report.smoothed_fitted(end) / base - 1.0) * 100.0
    return report


def bootstrap_slope_confidence(
    series: Sequence[float], n_resamples: int = 200, seed: int = 0
) -> float:
    """Fraction of pair-bootstrap resamples whose least-squares slope is positive."""
    if n_resamples < 1:
        raise ParameterError(f"n_resamples must be positive, got {n_resamples}")
    y = np.asarray(series, dtype=np.float64)
    if len(y) < 2:
        raise ParameterError("bootstrap slope needs at least two points")
    t = np.arange(len(y), dtype=np.float64)
    rng = numpy_rng(seed)
    positive = 0
    for _ in range(n_resamples):
        idx = rng.integers(0, len(y), size=len(y))
        ts, ys = t[idx], y[idx]
        spread = ((ts - ts.mean()) ** 2).sum()
        if spread == 0:
            continue
        if ((ts - ts.mean()) * (ys - ys.mean())).sum() / spread > 0:
            positive += 1
    return positive / n_resamples


def yearly_means(series: Sequence[float], period: int = 12) -> list[float]:
    """Means over consecutive chunks of ``period`` steps; a trailing partial chunk is kept."""
    if period < 1:
        raise ParameterError(f"period must be positive, got {period}")
    y = np.asarray(series, dtype=np.float64)
    return [float(y[i : i + period].mean()) for i in range(0, len(y), period)]
