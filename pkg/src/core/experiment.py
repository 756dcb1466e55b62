"""Run directory: recorded configuration, persisted phases for resume, per-iteration tables.

Layout::

    run.json                      configuration, seed, dataset and topology hashes, progress
    topology.json                 hypergraph manifest
    iter_k/links/<link_ref>.bin   trained links
    iter_k/ensembles/<node>.bin   ensemble teachers
    iter_k/pseudolabels/          teacher outputs on S_U produced by iteration k
    iter_k/report.csv             distilled edge against the baseline on the test set
    iter_k/teacher.csv            ensemble teachers against the baseline on the test set
    iter_k/errors.csv             distilled-edge monthly L2 over test and unlabeled months
    iter_k/consistency.csv        temporal variance of test predictions
    logs/run.log
"""

import csv
import json
import os
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from core.config import ReportConfig, RunConfig, config
from core.dataset import Manifest, ManifestLayerSource, dataset_hash, load_manifest
from core.ensembles import EnsembleModel
from core.error_handler import (
    ConfigurationError,
    DataError,
    FormatError,
    ParameterError,
    UndefinedMetricError,
)
from core.hypergraph import HypergraphTopology, build_topology
from core.links import LinkModel, link_from_record
from core.metrics import TaskEvaluation, arpi, per_timestamp_l2, rpi, temporal_consistency
from core.pseudolabel_store import INDEX_NAME, PseudolabelStore
from core.serialization import read_model, write_model
from core.ssl_engine import HypergraphEngine, IterationResult
from utils.logger import get_logger
from utils.version import require_compatible_format

logger = get_logger(__name__)

RUN_MANIFEST = "run.json"
TOPOLOGY_MANIFEST = "topology.json"
LOG_PATH = Path("logs") / config.log_file_name

REPORT_FIELDS = ["iteration", "task", "edge", "timestamp", "l2", "baseline_l2", "rpi"]
ERROR_FIELDS = ["iteration", "task", "edge", "timestamp", "split", "l2"]
CONSISTENCY_FIELDS = [
    "iteration",
    "task",
    "predictor",
    "window",
    "mean_variance",
    "inverse",
    "pairs",
]
SUMMARY_TIMESTAMP = "ALL"
ARPI_TASK = "ARPI"

# Settings that change trained artifacts; the rest may differ on resume.
_IDENTITY_KEYS = ("ensemble", "link", "validation_fraction", "seed")


def write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)


def read_json(path: Path) -> dict[str, Any]:
    """
    Raises:
        DataError: If the file is missing
        FormatError: If it is not valid JSON
    """
    if not path.is_file():
        raise DataError("run artifact not found", path=path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"unreadable JSON: {e}", path=path) from e


def write_csv(path: Path, fieldnames: Sequence[str], rows: Sequence[Mapping[str, Any]]) -> None:
    """Write a CSV table atomically."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    os.replace(tmp, path)


def read_csv(path: Path) -> list[dict[str, str]]:
    """
    Raises:
        DataError: If the file is missing
    """
    if not path.is_file():
        raise DataError("run artifact not found", path=path)
    with path.open(newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def iteration_dir(run_dir: Path, k: int) -> Path:
    return Path(run_dir) / f"iter_{k}"


def completed_iterations(run_dir: Path) -> list[int]:
    """Iterations whose ``report.csv`` exists, in order."""
    found = []
    for path in Path(run_dir).glob("iter_*/report.csv"):
        suffix = path.parent.name.removeprefix("iter_")
        if suffix.isdigit():
            found.append(int(suffix))
    return sorted(found)


def prune_iterations(run_dir: Path, keep: int) -> list[int]:
    """Remove every ``iter_k`` directory with k above ``keep``; returns the removed k."""
    removed = []
    for path in sorted(Path(run_dir).glob("iter_*")):
        suffix = path.name.removeprefix("iter_")
        if path.is_dir() and suffix.isdigit() and int(suffix) > keep:
            logger.info(f"Removing {path}: the run now stops at iteration {keep}")
            shutil.rmtree(path)
            removed.append(int(suffix))
    return sorted(removed)


def _format(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def _safe_rpi(l2: float, baseline_l2: float) -> float | None:
    try:
        return rpi(l2, baseline_l2)
    except UndefinedMetricError:
        return None


def evaluation_rows(
    k: int, evaluations: Mapping[str, TaskEvaluation], edges: Mapping[str, str]
) -> list[dict[str, Any]]:
    """Per-timestamp rows, one summary row per task, then the ARPI row."""
    rows: list[dict[str, Any]] = []
    for task, evaluation in evaluations.items():
        series = zip(evaluation.timestamps, evaluation.l2, evaluation.baseline_l2)
        for timestamp, l2, base in series:
            rows.append(
                {
                    "iteration": k,
                    "task": task,
                    "edge": edges[task],
                    "timestamp": timestamp,
                    "l2": _format(l2),
                    "baseline_l2": _format(base),
                    "rpi": _format(_safe_rpi(l2, base)),
                }
            )
        rows.append(
            {
                "iteration": k,
                "task": task,
                "edge": edges[task],
                "timestamp": SUMMARY_TIMESTAMP,
                "l2": _format(evaluation.mean_l2),
                "baseline_l2": _format(evaluation.mean_baseline_l2),
                "rpi": _format(evaluation.rpi),
            }
        )
    rows.append(
        {
            "iteration": k,
            "task": ARPI_TASK,
            "edge": "",
            "timestamp": SUMMARY_TIMESTAMP,
            "l2": "",
            "baseline_l2": "",
            "rpi": _format(arpi([e.rpi for e in evaluations.values()])),
        }
    )
    return rows


def summary_rpis(rows: Sequence[Mapping[str, str]]) -> tuple[dict[str, float], float]:
    """Per-task RPI and ARPI read back from an evaluation table."""
    per_task = {}
    total = None
    for row in rows:
        if row["timestamp"] != SUMMARY_TIMESTAMP:
            continue
        if row["task"] == ARPI_TASK:
            total = float(row["rpi"])
        else:
            per_task[row["task"]] = float(row["rpi"])
    if total is None:
        raise FormatError("evaluation table lacks its ARPI row")
    return per_task, total


class RunStore:
    """Persists and restores the phases of ``HypergraphEngine.run`` under a run directory."""

    def __init__(
        self, run_dir: Path, engine: HypergraphEngine, report: ReportConfig = config.report
    ):
        self.run_dir = Path(run_dir)
        self.engine = engine
        self.report = report

    def _links_dir(self, k: int) -> Path:
        return iteration_dir(self.run_dir, k) / "links"

    def _ensembles_dir(self, k: int) -> Path:
        return iteration_dir(self.run_dir, k) / "ensembles"

    def _pseudolabels_dir(self, k: int) -> Path:
        return iteration_dir(self.run_dir, k) / "pseudolabels"

    @staticmethod
    def _complete(paths: Mapping[str, Path], what: str) -> bool:
        present = [path.is_file() for path in paths.values()]
        if all(present):
            return True
        if any(present):
            logger.warning(f"Partial {what} found; recomputing the phase")
        return False

    def load_links(self, k: int) -> dict[str, LinkModel] | None:
        refs = [edge.link_ref for edge in self.engine.topology.hyperedges]
        paths = {ref: self._links_dir(k) / f"{ref}.bin" for ref in refs}
        if not self._complete(paths, f"iteration {k} links"):
            return None
        return {ref: link_from_record(read_model(path)) for ref, path in paths.items()}

    def save_links(self, k: int, links: Mapping[str, LinkModel]) -> None:
        for ref, link in links.items():
            write_model(self._links_dir(k) / f"{ref}.bin", link.to_record())
        logger.debug(f"Saved {len(links)} iteration {k} links")

    def load_ensembles(self, k: int) -> dict[str, EnsembleModel] | None:
        nodes = self.engine.topology.output_names
        paths = {node: self._ensembles_dir(k) / f"{node}.bin" for node in nodes}
        if not self._complete(paths, f"iteration {k} ensembles"):
            return None
        ensembles = {
            node: EnsembleModel.from_record(read_model(path)) for node, path in paths.items()
        }
        expected = self.engine.ensemble_config.variant
        if any(model.variant is not expected for model in ensembles.values()):
            logger.warning(f"Stored iteration {k} ensembles are not {expected.value}; refitting")
            return None
        return ensembles

    def save_ensembles(self, k: int, ensembles: Mapping[str, EnsembleModel]) -> None:
        for node, model in ensembles.items():
            write_model(self._ensembles_dir(k) / f"{node}.bin", model.to_record())

    def load_pseudolabels(self, k: int) -> PseudolabelStore | None:
        directory = self._pseudolabels_dir(k)
        if not (directory / INDEX_NAME).is_file():
            return None
        return PseudolabelStore.load(directory)

    def save_pseudolabels(self, k: int, store: PseudolabelStore) -> None:
        store.save(self._pseudolabels_dir(k))

    def save_iteration(self, result: IterationResult) -> None:
        """Write the four per-iteration tables and record progress in ``run.json``."""
        k = result.k
        directory = iteration_dir(self.run_dir, k)
        edges = {task: edge.link_ref for task, edge in result.distilled.items()}
        evaluations = {task: edge.evaluation for task, edge in result.distilled.items()}
        write_csv(directory / "report.csv", REPORT_FIELDS, evaluation_rows(k, evaluations, edges))
        variant = self.engine.ensemble_config.variant.value
        write_csv(
            directory / "teacher.csv",
            REPORT_FIELDS,
            evaluation_rows(k, result.teachers, {task: variant for task in result.teachers}),
        )
        write_csv(directory / "errors.csv", ERROR_FIELDS, self.error_rows(result))
        write_csv(directory / "consistency.csv", CONSISTENCY_FIELDS, self.consistency_rows(result))
        update_run_manifest(
            self.run_dir,
            completed_iterations=completed_iterations(self.run_dir),
            arpi={
                str(i): summary_rpis(read_csv(iteration_dir(self.run_dir, i) / "report.csv"))[1]
                for i in completed_iterations(self.run_dir)
            },
        )
        logger.info(f"Wrote iteration {k} tables to {directory}")

    def error_rows(self, result: IterationResult) -> list[dict[str, Any]]:
        """Monthly L2 of each distilled edge over the test and unlabeled months."""
        engine = self.engine
        months = [(t, "test") for t in engine.split.test] + [
            (t, "unlabeled") for t in engine.split.unlabeled
        ]
        split_of = dict(months)
        timestamps = sorted(split_of)
        rows = []
        for task, edge in result.distilled.items():
            predictions = engine.edge_predictions(edge.link_ref, edge.link, timestamps)
            scores = per_timestamp_l2(predictions, engine.truths(task, timestamps))
            for timestamp, l2 in scores.items():
                rows.append(
                    {
                        "iteration": result.k,
                        "task": task,
                        "edge": edge.link_ref,
                        "timestamp": timestamp,
                        "split": split_of[timestamp],
                        "l2": _format(l2),
                    }
                )
        return rows

    def consistency_rows(self, result: IterationResult) -> list[dict[str, Any]]:
        """Temporal variance of distilled-edge and teacher predictions on the test months."""
        engine = self.engine
        window = self.report.consistency_window
        test = sorted(engine.split.test)
        series: dict[tuple[str, str], list] = {}
        for task, edge in result.distilled.items():
            predictions = engine.edge_predictions(edge.link_ref, edge.link, test)
            series[(task, "distilled")] = [predictions[t] for t in sorted(predictions)]
        for task, grids in engine.teacher_outputs(result.state, test).items():
            series[(task, "teacher")] = [grids[t] for t in sorted(grids)]

        rows = []
        for (task, predictor), grids in series.items():
            try:
                report = temporal_consistency(grids, window, task)
            except (ParameterError, UndefinedMetricError) as e:
                logger.warning(f"No consistency score for {task} ({predictor}): {e}")
                continue
            rows.append(
                {
                    "iteration": result.k,
                    "task": task,
                    "predictor": predictor,
                    "window": window,
                    "mean_variance": _format(report.mean_variance),
                    "inverse": _format(report.inverse),
                    "pairs": report.pairs,
                }
            )
        return rows


@dataclass
class Experiment:
    """Everything a command needs to drive or inspect one run."""

    run_config: RunConfig
    manifest: Manifest
    topology: HypergraphTopology
    engine: HypergraphEngine
    store: RunStore


def _identity(config_dict: Mapping[str, Any], data_hash: str) -> dict[str, Any]:
    identity = {key: config_dict.get(key) for key in _IDENTITY_KEYS}
    identity["dataset_hash"] = data_hash
    return identity


def update_run_manifest(run_dir: Path, **fields: Any) -> None:
    path = Path(run_dir) / RUN_MANIFEST
    data = read_json(path)
    data.update(fields)
    write_json(path, data)


def load_run_config(run_dir: Path) -> RunConfig:
    """
    Read the configuration recorded in ``run.json``.

    Raises:
        DataError: If the run directory has no run.json
        FormatError: On an incompatible format version
    """
    path = Path(run_dir) / RUN_MANIFEST
    data = read_json(path)
    require_compatible_format(data.get("format_version"), config.run_format_version, "run manifest")
    return RunConfig.from_dict(data["config"])


def prepare_run_dir(
    run_config: RunConfig, manifest: Manifest, topology: HypergraphTopology, force: bool
) -> None:
    """
    Record the run configuration, or check it against the recorded one.

    Raises:
        ConfigurationError: If the directory holds a run with a different identity and
            ``force`` is not set
    """
    run_dir = run_config.run_dir
    data_hash = dataset_hash(manifest)
    recorded_path = run_dir / RUN_MANIFEST
    config_dict = run_config.to_dict()
    if recorded_path.is_file() and not force:
        recorded = read_json(recorded_path)
        require_compatible_format(
            recorded.get("format_version"), config.run_format_version, "run manifest"
        )
        if _identity(recorded["config"], recorded.get("dataset_hash", "")) != _identity(
            config_dict, data_hash
        ):
            raise ConfigurationError(
                f"{run_dir} holds a run with another dataset or configuration; use --force"
            )
        logger.info(f"Resuming run in {run_dir}")
    elif force and run_dir.exists():
        for stale in list(run_dir.glob("iter_*")) + [run_dir / "tables"]:
            if stale.is_dir():
                logger.info(f"--force: removing {stale}")
                shutil.rmtree(stale)

    run_dir.mkdir(parents=True, exist_ok=True)
    write_json(run_dir / TOPOLOGY_MANIFEST, topology.to_manifest())
    write_json(
        recorded_path,
        {
            "format_version": config.run_format_version,
            "app_version": config.version,
            "config": config_dict,
            "master_seed": run_config.seed,
            "dataset_hash": data_hash,
            "topology_hash": topology.topology_hash(),
            "status": "running",
            "completed_iterations": completed_iterations(run_dir),
        },
    )


def open_experiment(run_config: RunConfig, force: bool = False) -> Experiment:
    """Load the dataset, build topology and engine, and prepare the run directory."""
    manifest = load_manifest(run_config.dataset)
    topology = build_topology(manifest.input_names, manifest.output_names)
    engine = HypergraphEngine(
        topology,
        manifest.split,
        ManifestLayerSource(manifest),
        link_config=run_config.link,
        ensemble_config=run_config.ensemble,
        seed=run_config.seed,
        jobs=run_config.jobs,
        validation_fraction=run_config.validation_fraction,
    )
    prepare_run_dir(run_config, manifest, topology, force)
    return Experiment(run_config, manifest, topology, engine, RunStore(run_config.run_dir, engine))


def run_experiment(run_config: RunConfig, force: bool = False) -> list[IterationResult]:
    """
    Run or resume the semi-supervised loop and write every per-iteration table.

    Iterations above ``run_config.iterations`` left by an earlier, longer run are removed
    first so reports only see this run.

    Returns:
        One result per completed iteration
    """
    experiment = open_experiment(run_config, force)
    if prune_iterations(run_config.run_dir, run_config.iterations):
        update_run_manifest(
            run_config.run_dir, completed_iterations=completed_iterations(run_config.run_dir)
        )
    results = experiment.engine.run(
        run_config.iterations, run_config.convergence_threshold, store=experiment.store
    )
    update_run_manifest(
        run_config.run_dir,
        status="complete",
        final_arpi=results[-1].distilled_arpi,
        final_teacher_arpi=results[-1].teacher_arpi,
    )
    return results
