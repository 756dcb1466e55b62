"""Semi-supervised hypergraph engine.

Iteration 1 trains every link on the labeled set S_L, then fits one ensemble teacher per
output node on S_L candidate stacks. Teachers label the unlabeled set S_U; iteration k+1
retrains every link from scratch on S_L ground truth plus S_U pseudolabels, recomputing
stage-2 inputs from the freshly trained stage-1 links, and refits the teachers on S_L.
"""

import hashlib
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np
import torch

from core.config import EnsembleConfig, EnsembleVariant, LinkConfig
from core.dataset import DatasetSplit, LayerSource
from core.ensembles import EnsembleModel, fit_ensemble
from core.error_handler import ConfigurationError, UndefinedMetricError
from core.grid import LayerGrid, Volume, masked_l2, pixelwise_median
from core.hypergraph import (
    HyperedgeKind,
    HyperedgeSpec,
    HypergraphTopology,
    PlanStep,
    SourceKind,
    SourceRef,
    StepKind,
    candidate_pool,
    inference_plan,
)
from core.links import LinkModel, MTEBaseline, fit_link, make_link, train_for_link
from core.metrics import TaskEvaluation, arpi, per_timestamp_l2, rpi
from core.pseudolabel_store import PseudolabelEntry, PseudolabelStore, Provenance, targets_for
from core.serialization import encode_model
from core.training import TrainingReport
from utils.async_helpers import TaskManager
from utils.logger import get_logger
from utils.seeding import derive_seed

logger = get_logger(__name__)

Products = dict[str, LayerGrid]
LinkFactory = Callable[[HyperedgeSpec, int], LinkModel]


class AccessAudit:
    """Log of the timestamps every fit consumed."""

    def __init__(self) -> None:
        self._records: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def record(self, operation: str, timestamps: Iterable[str]) -> None:
        with self._lock:
            self._records.extend((operation, t) for t in timestamps)

    @property
    def records(self) -> list[tuple[str, str]]:
        with self._lock:
            return list(self._records)

    def accessed(self, operation_prefix: str = "") -> set[str]:
        """Timestamps read by operations whose name starts with ``operation_prefix``."""
        return {t for op, t in self.records if op.startswith(operation_prefix)}

    def assert_no_access(self, timestamps: Iterable[str], operation_prefix: str = "") -> None:
        """
        Raises:
            AssertionError: If any matching operation read one of ``timestamps``
        """
        leaked = self.accessed(operation_prefix) & set(timestamps)
        if leaked:
            raise AssertionError(f"fits accessed forbidden timestamps {sorted(leaked)}")


@dataclass
class IterationState:
    """Trained models of iteration k.

    Attributes:
        k: Iteration index; 1 is the supervised iteration
        links: Link per hyperedge ``link_ref``
        link_reports: Training report per link (absent for links loaded from disk)
        ensembles: Teacher per output node
        ensemble_reports: Training report per teacher
        evaluation: Summary scores attached by the driver
    """

    k: int
    links: dict[str, LinkModel]
    link_reports: dict[str, TrainingReport] = field(default_factory=dict)
    ensembles: dict[str, EnsembleModel] = field(default_factory=dict)
    ensemble_reports: dict[str, TrainingReport] = field(default_factory=dict)
    evaluation: dict[str, float] = field(default_factory=dict)

    def state_hash(self) -> str:
        """SHA-256 over every serialized link and ensemble, in key order."""
        digest = hashlib.sha256()
        for ref in sorted(self.links):
            digest.update(ref.encode())
            digest.update(encode_model(self.links[ref].to_record()))
        for node in sorted(self.ensembles):
            digest.update(node.encode())
            digest.update(encode_model(self.ensembles[node].to_record()))
        return digest.hexdigest()


@dataclass
class DistilledEdge:
    """Best single edge of a task at one iteration."""

    task: str
    link_ref: str
    link: LinkModel
    validation_l2: float
    evaluation: TaskEvaluation


@dataclass
class IterationResult:
    """Per-iteration scores produced by ``HypergraphEngine.run``."""

    state: IterationState
    distilled: dict[str, DistilledEdge]
    teachers: dict[str, TaskEvaluation]
    validation_arpi: float

    @property
    def k(self) -> int:
        return self.state.k

    @property
    def distilled_arpi(self) -> float:
        return arpi([edge.evaluation.rpi for edge in self.distilled.values()])

    @property
    def teacher_arpi(self) -> float:
        return arpi([evaluation.rpi for evaluation in self.teachers.values()])


class PhaseStore(Protocol):
    """Persistence hooks; ``load_*`` returns None when the phase has not completed."""

    def load_links(self, k: int) -> dict[str, LinkModel] | None: ...

    def save_links(self, k: int, links: Mapping[str, LinkModel]) -> None: ...

    def load_ensembles(self, k: int) -> dict[str, EnsembleModel] | None: ...

    def save_ensembles(self, k: int, ensembles: Mapping[str, EnsembleModel]) -> None: ...

    def load_pseudolabels(self, k: int) -> PseudolabelStore | None: ...

    def save_pseudolabels(self, k: int, store: PseudolabelStore) -> None: ...

    def save_iteration(self, result: IterationResult) -> None: ...


class HypergraphEngine:
    """Binds topology, split, data and learner settings; runs the semi-supervised loop."""

    def __init__(
        self,
        topology: HypergraphTopology,
        split: DatasetSplit,
        source: LayerSource,
        link_config: LinkConfig = LinkConfig(),
        ensemble_config: EnsembleConfig = EnsembleConfig(),
        seed: int = 0,
        jobs: int = 1,
        validation_fraction: float = 0.2,
        link_factory: LinkFactory | None = None,
        audit: AccessAudit | None = None,
    ):
        """
        Args:
            topology: Hypergraph over the dataset's input and output layers
            split: Labeled, test and unlabeled timestamps
            source: Grid reader
            link_config: Learner used by the default link factory, and its schedule
            ensemble_config: Teacher variant, candidate pool and schedule
            seed: Master seed every phase seed derives from
            jobs: Maximum concurrent fits within a stage
            validation_fraction: Tail of S_L used to pick the best edge per task
            link_factory: Builds an untrained link for a hyperedge and seed
            audit: Access log shared with the caller
        """
        self.topology = topology
        self.split = split
        self.source = source
        self.link_config = link_config
        self.ensemble_config = ensemble_config
        self.seed = seed
        self.tasks = TaskManager(jobs)
        self.validation = split.validation_slice(validation_fraction)
        self.link_factory = link_factory or self._default_link
        self.audit = audit or AccessAudit()
        self.plan = inference_plan(topology)
        self.baseline: dict[str, tuple[str, LinkModel]] = {}
        # Single-threaded kernels keep every reduction identical whatever --jobs is.
        torch.set_num_threads(1)

    def _default_link(self, edge: HyperedgeSpec, seed: int) -> LinkModel:
        return make_link(edge.channel_names, self.link_config, seed=seed)

    # Data access

    def usable_timestamps(self, timestamps: Sequence[str]) -> list[str]:
        """Timestamps with every input layer available; the rest are logged and skipped."""
        usable = []
        for timestamp in timestamps:
            missing = [
                n for n in self.topology.input_names if not self.source.available(timestamp, n)
            ]
            if missing:
                logger.warning(f"Skipping {timestamp}: input layers {missing} unavailable")
                continue
            usable.append(timestamp)
        return usable

    def _input_products(self, timestamps: Sequence[str]) -> dict[str, Products]:
        return {
            t: {
                SourceRef(SourceKind.NODE, name).key: self.source.get(t, name)
                for name in self.topology.input_names
            }
            for t in timestamps
        }

    def _truth(self, timestamp: str, node: str) -> LayerGrid | None:
        return self.source.reference(timestamp, node)

    @staticmethod
    def _volume(products: Products, names: Sequence[str]) -> Volume:
        return Volume(tuple(products[name] for name in names), tuple(names))

    # Staged execution

    def _execute_batch(
        self,
        batch: Sequence[PlanStep],
        links: Mapping[str, LinkModel],
        products: dict[str, Products],
    ) -> None:
        timestamps = list(products)
        if not timestamps:
            return

        def run_step(step: PlanStep) -> list[LayerGrid]:
            if step.kind is StepKind.MEDIAN:
                return [
                    pixelwise_median([products[t][key] for key in step.consumes])
                    for t in timestamps
                ]
            assert step.hyperedge is not None
            link = links[step.hyperedge.link_ref]
            volumes = [self._volume(products[t], step.consumes) for t in timestamps]
            return link.predict_many(volumes)

        results = self.tasks.run_all(
            [(step.produces, lambda s=step: run_step(s)) for step in batch]
        )
        for step, grids in zip(batch, results):
            for t, grid in zip(timestamps, grids):
                products[t][step.produces] = grid

    def run_products(self, state: IterationState, timestamps: Sequence[str]) -> dict[str, Products]:
        """
        Execute the full two-stage plan for each timestamp.

        Args:
            state: Iteration whose links run
            timestamps: Timestamps to infer; each needs every input layer

        Returns:
            Per timestamp, every product keyed as in the plan (inputs, link outputs, medians)
        """
        products = self._input_products(timestamps)
        for batch in self.plan.batches():
            self._execute_batch(batch, state.links, products)
        return products

    def _train_links(
        self, k: int, targets: Mapping[str, Sequence[tuple[str, LayerGrid]]]
    ) -> tuple[dict[str, LinkModel], dict[str, TrainingReport]]:
        """Fit every link stage by stage; stage-2 inputs come from the new stage-1 links."""
        wanted = sorted({t for pairs in targets.values() for t, _ in pairs})
        timestamps = set(self.usable_timestamps(wanted))
        products = self._input_products(sorted(timestamps))
        links: dict[str, LinkModel] = {}
        reports: dict[str, TrainingReport] = {}

        def fit(edge: HyperedgeSpec) -> tuple[LinkModel, TrainingReport]:
            pairs = [(t, y) for t, y in targets[edge.output.name] if t in timestamps]
            phase = f"iter{k}/link/{edge.link_ref}"
            seed = derive_seed(self.seed, phase)
            self.audit.record(phase, [t for t, _ in pairs])
            samples = [(self._volume(products[t], edge.channel_names), y) for t, y in pairs]
            return fit_link(
                self.link_factory(edge, seed), samples, train_for_link(self.link_config.train, seed)
            )

        batches = self.plan.batches()
        for position, batch in enumerate(batches):
            link_steps = [step for step in batch if step.kind is StepKind.LINK]
            if link_steps:
                logger.info(
                    f"Iteration {k}: fitting {len(link_steps)} stage-{batch[0].stage} links "
                    f"on {len(timestamps)} timestamps"
                )
                fitted = self.tasks.run_all(
                    [
                        (step.produces, lambda e=step.hyperedge: fit(e))
                        for step in link_steps
                    ]
                )
                for step, (link, report) in zip(link_steps, fitted):
                    assert step.hyperedge is not None
                    links[step.hyperedge.link_ref] = link
                    reports[step.hyperedge.link_ref] = report
            if position < len(batches) - 1:
                self._execute_batch(batch, links, products)
        return links, reports

    # Step 1

    def initialize_hypergraph(self) -> IterationState:
        """
        Train every link on S_L only.

        Raises:
            ConfigurationError: If S_L is empty
        """
        if not self.split.labeled:
            raise ConfigurationError("the labeled set is empty")
        targets = {
            node: [(t, self.source.get(t, node)) for t in self.split.labeled]
            for node in self.topology.output_names
        }
        links, reports = self._train_links(1, targets)
        logger.info(f"Iteration 1: trained {len(links)} links on {len(self.split.labeled)} months")
        return IterationState(k=1, links=links, link_reports=reports)

    # Step 2

    def candidate_keys(self, node: str, include_complex: bool | None = None) -> tuple[str, ...]:
        if include_complex is None:
            include_complex = self.ensemble_config.include_complex
        pool = candidate_pool(self.topology, node, include_complex)
        return tuple(edge.product_key for edge in pool)

    def candidate_stack(self, products: Products, keys: Sequence[str]) -> Volume:
        """Candidate predictions for one timestamp, densified: links are defined at every cell."""
        return Volume(tuple(products[key].densified() for key in keys), tuple(keys))

    def train_ensembles(
        self,
        state: IterationState,
        variant: EnsembleVariant | str | None = None,
        include_complex: bool | None = None,
        products: Mapping[str, Products] | None = None,
    ) -> IterationState:
        """
        Fit one teacher per output node on S_L candidate stacks.

        Args:
            state: Iteration with trained links
            variant: Ensemble variant (defaults to the engine's)
            include_complex: Add AH and CH candidates (defaults to the engine's)
            products: Precomputed S_L products of ``state``

        Returns:
            Copy of ``state`` with ensembles and their reports
        """
        variant = EnsembleVariant(variant or self.ensemble_config.variant)
        timestamps = self.usable_timestamps(self.split.labeled)
        if products is None:
            products = self.run_products(state, timestamps)
        settings = self.ensemble_config

        def fit(node: str) -> tuple[EnsembleModel, TrainingReport]:
            keys = self.candidate_keys(node, include_complex)
            phase = f"iter{state.k}/ensemble/{node}"
            self.audit.record(phase, timestamps)
            stacks = [self.candidate_stack(products[t], keys) for t in timestamps]
            targets = [self.source.get(t, node) for t in timestamps]
            return fit_ensemble(
                variant,
                stacks,
                targets,
                replace(settings.train, seed=derive_seed(self.seed, phase)),
                hidden_units=settings.hidden_units,
                hidden_channels=settings.hidden_channels,
            )

        nodes = self.topology.output_names
        fitted = self.tasks.run_all([(node, lambda n=node: fit(n)) for node in nodes])
        logger.info(f"Iteration {state.k}: fitted {len(nodes)} {variant.value} teachers")
        return replace(
            state,
            ensembles={node: model for node, (model, _) in zip(nodes, fitted)},
            ensemble_reports={node: report for node, (_, report) in zip(nodes, fitted)},
        )

    def teacher_outputs(
        self,
        state: IterationState,
        timestamps: Sequence[str],
        products: Mapping[str, Products] | None = None,
    ) -> dict[str, dict[str, LayerGrid]]:
        """Teacher output per node and timestamp (timestamps lacking inputs are skipped)."""
        usable = self.usable_timestamps(timestamps)
        if products is None:
            products = self.run_products(state, usable)
        outputs: dict[str, dict[str, LayerGrid]] = {}
        for node, model in state.ensembles.items():
            stacks = [self.candidate_stack(products[t], model.channels) for t in usable]
            outputs[node] = dict(zip(usable, model.forward_many(stacks)))
        return outputs

    # Step 3

    def generate_pseudolabels(self, state: IterationState) -> PseudolabelStore:
        """Teacher outputs on S_U, densified, with provenance."""
        if not state.ensembles:
            raise ConfigurationError(f"iteration {state.k} has no trained teachers")
        store = PseudolabelStore(state.k, self.split.unlabeled)
        topology_hash = self.topology.topology_hash()
        outputs = self.teacher_outputs(state, self.split.unlabeled)
        for node, grids in outputs.items():
            model = state.ensembles[node]
            provenance = Provenance(
                iteration=state.k,
                variant=model.variant.value,
                candidates=model.channels,
                topology_hash=topology_hash,
            )
            for timestamp, grid in grids.items():
                store.add(PseudolabelEntry(node, timestamp, grid.densified(), provenance))
        logger.info(f"Iteration {state.k}: generated {store.count} pseudolabels")
        return store

    # Step 4

    def semi_supervised_iteration(
        self, state: IterationState, pseudolabels: PseudolabelStore, refit_ensembles: bool = True
    ) -> IterationState:
        """
        Retrain every link from scratch on S_L ground truth plus S_U pseudolabels.

        Raises:
            ConfigurationError: If the pseudolabel store is empty
        """
        if pseudolabels.is_empty():
            raise ConfigurationError(f"no pseudolabels from iteration {state.k}")
        k = state.k + 1
        targets = {
            node: [(t, self.source.get(t, node)) for t in self.split.labeled]
            + targets_for(pseudolabels, node, pseudolabels.timestamps(node))
            for node in self.topology.output_names
        }
        links, reports = self._train_links(k, targets)
        new_state = IterationState(k=k, links=links, link_reports=reports)
        logger.info(
            f"Iteration {k}: retrained {len(links)} links with {pseudolabels.count} pseudolabels"
        )
        return self.train_ensembles(new_state) if refit_ensembles else new_state

    # Evaluation

    def edge_predictions(
        self, link_ref: str, link: LinkModel, timestamps: Sequence[str]
    ) -> dict[str, LayerGrid]:
        """Predictions of a single E edge from its input layer."""
        edge = self.topology.hyperedge(link_ref)
        if edge.kind is not HyperedgeKind.E:
            raise ConfigurationError(f"{link_ref} is not a single edge")
        source_name = edge.inputs[0].name
        usable = [t for t in timestamps if self.source.available(t, source_name)]
        volumes = [
            Volume((self.source.get(t, source_name),), edge.channel_names) for t in usable
        ]
        return dict(zip(usable, link.predict_many(volumes)))

    def truths(self, node: str, timestamps: Sequence[str]) -> dict[str, LayerGrid]:
        """Ground truth (hidden reference included) for evaluation only."""
        grids = {t: self._truth(t, node) for t in timestamps}
        return {t: grid for t, grid in grids.items() if grid is not None}

    def _select_edge(self, state: IterationState, task: str) -> tuple[str, float]:
        truths = self.truths(task, self.validation)
        best: tuple[str, float] | None = None
        for edge in self.topology.edges_of_kind(HyperedgeKind.E):
            if edge.output.name != task:
                continue
            scores = per_timestamp_l2(
                self.edge_predictions(edge.link_ref, state.links[edge.link_ref], self.validation),
                truths,
            )
            if not scores:
                continue
            score = float(np.mean(list(scores.values())))
            if best is None or score < best[1]:
                best = (edge.link_ref, score)
        if best is None:
            raise UndefinedMetricError(f"no E edge of {task} can be scored on the validation slice")
        return best

    def set_baseline(self, state: IterationState) -> None:
        """Record the best supervised edge per task as the RPI reference."""
        if state.k != 1:
            raise ConfigurationError("the RPI baseline comes from iteration 1")
        for task in self.topology.output_names:
            ref, _ = self._select_edge(state, task)
            self.baseline[task] = (ref, state.links[ref])
        logger.info(
            "Baseline edges: "
            + ", ".join(f"{task}={ref}" for task, (ref, _) in self.baseline.items())
        )

    def _baseline_scores(self, task: str, timestamps: Sequence[str]) -> dict[str, float]:
        if task not in self.baseline:
            raise ConfigurationError("no baseline edge recorded; run iteration 1 first")
        ref, link = self.baseline[task]
        return per_timestamp_l2(
            self.edge_predictions(ref, link, timestamps), self.truths(task, timestamps)
        )

    def distill_best_edge(self, state: IterationState, task: str) -> DistilledEdge:
        """
        Pick the task's E edge with the lowest validation L2 and score it on the test set.

        The first call with the iteration-1 state records the baseline edges.
        """
        if not self.baseline and state.k == 1:
            self.set_baseline(state)
        ref, validation_l2 = self._select_edge(state, task)
        link = state.links[ref]
        scores = per_timestamp_l2(
            self.edge_predictions(ref, link, self.split.test), self.truths(task, self.split.test)
        )
        evaluation = TaskEvaluation.from_series(
            task, scores, self._baseline_scores(task, self.split.test)
        )
        return DistilledEdge(task, ref, link, validation_l2, evaluation)

    def validation_arpi(self, distilled: Mapping[str, DistilledEdge]) -> float:
        """ARPI of the distilled edges over the baseline on the validation slice."""
        values = []
        for task, edge in distilled.items():
            base = self._baseline_scores(task, self.validation)
            values.append(rpi(edge.validation_l2, float(np.mean(list(base.values())))))
        return arpi(values)

    def evaluate_teachers(
        self, state: IterationState, products: Mapping[str, Products] | None = None
    ) -> dict[str, TaskEvaluation]:
        """Test-set RPI of each teacher against the iteration-1 best edge."""
        outputs = self.teacher_outputs(state, self.split.test, products)
        evaluations = {}
        for task, grids in outputs.items():
            scores = per_timestamp_l2(grids, self.truths(task, self.split.test))
            evaluations[task] = TaskEvaluation.from_series(
                task, scores, self._baseline_scores(task, self.split.test)
            )
        return evaluations

    def evaluate_mte(
        self, hidden_channels: int, train_epochs: int | None = None
    ) -> list[dict[str, TaskEvaluation]]:
        """
        Train the monolithic baseline on S_L, then from scratch on S_L plus its own S_U
        pseudolabels.

        Returns:
            Test evaluations per task for the supervised and the semi-supervised round
        """
        if not self.baseline:
            raise ConfigurationError("no baseline edge recorded; run iteration 1 first")
        inputs = self.topology.input_names
        outputs = self.topology.output_names
        train = self.link_config.train
        if train_epochs is not None:
            train = replace(train, max_epochs=train_epochs)

        def volume(t: str) -> Volume:
            return Volume(tuple(self.source.get(t, n) for n in inputs), inputs)

        labeled = self.usable_timestamps(self.split.labeled)
        unlabeled = self.usable_timestamps(self.split.unlabeled)
        test = self.usable_timestamps(self.split.test)
        samples: list[tuple[Volume, Sequence[LayerGrid | None]]] = [
            (volume(t), [self.source.get(t, n) for n in outputs]) for t in labeled
        ]
        mte = MTEBaseline(inputs, outputs, hidden_channels)
        rounds = []
        for k, used in ((1, labeled), (2, labeled + unlabeled)):
            phase = f"mte/iter{k}"
            seed = derive_seed(self.seed, phase)
            self.audit.record(phase, used)
            mte = mte.with_seed(seed)
            mte.fit(samples, replace(train, seed=seed))
            predictions = {t: mte.predict(volume(t)) for t in test}
            evaluations = {}
            for index, task in enumerate(outputs):
                scores = per_timestamp_l2(
                    {t: grids[index] for t, grids in predictions.items()}, self.truths(task, test)
                )
                evaluations[task] = TaskEvaluation.from_series(
                    task, scores, self._baseline_scores(task, test)
                )
            rounds.append(evaluations)
            logger.info(f"MTE round {k}: ARPI {arpi([e.rpi for e in evaluations.values()]):.3f}")
            samples += [
                (volume(t), [grid.densified() for grid in mte.predict(volume(t))])
                for t in unlabeled
            ]
        return rounds

    # Driver

    def iteration_result(self, state: IterationState) -> IterationResult:
        distilled = {
            task: self.distill_best_edge(state, task) for task in self.topology.output_names
        }
        result = IterationResult(
            state=state,
            distilled=distilled,
            teachers=self.evaluate_teachers(state),
            validation_arpi=self.validation_arpi(distilled),
        )
        state.evaluation.update(
            validation_arpi=result.validation_arpi,
            distilled_arpi=result.distilled_arpi,
            teacher_arpi=result.teacher_arpi,
        )
        logger.info(
            f"Iteration {state.k}: distilled ARPI {result.distilled_arpi:.3f}, "
            f"teacher ARPI {result.teacher_arpi:.3f}, validation ARPI {result.validation_arpi:.3f}"
        )
        return result

    def supervised_state(self, store: PhaseStore | None = None) -> IterationState:
        """Iteration-1 links and teachers, loaded from ``store`` when already there."""
        links = store.load_links(1) if store else None
        if links is None:
            state = self.initialize_hypergraph()
            if store:
                store.save_links(1, state.links)
        else:
            logger.info("Resuming: iteration 1 links loaded from the run directory")
            state = IterationState(k=1, links=links)
        self.set_baseline(state)
        ensembles = store.load_ensembles(1) if store else None
        if ensembles is None:
            state = self.train_ensembles(state)
            if store:
                store.save_ensembles(1, state.ensembles)
        else:
            state = replace(state, ensembles=ensembles)
        return state

    def run(
        self,
        iterations: int,
        convergence_threshold: float | None = None,
        store: PhaseStore | None = None,
    ) -> list[IterationResult]:
        """
        Iterate until ``iterations`` or until validation ARPI gains less than the threshold.

        Args:
            iterations: Maximum number of iterations (1 = supervised only)
            convergence_threshold: Minimum validation ARPI gain to continue; None disables
            store: Optional persistence for resume

        Returns:
            One result per completed iteration
        """
        state = self.supervised_state(store)
        results = [self.iteration_result(state)]
        if store:
            store.save_iteration(results[-1])

        for k in range(2, iterations + 1):
            previous = state
            pseudolabels = store.load_pseudolabels(previous.k) if store else None
            if pseudolabels is None:
                pseudolabels = self.generate_pseudolabels(previous)
                if store:
                    store.save_pseudolabels(previous.k, pseudolabels)
            links = store.load_links(k) if store else None
            if links is None:
                state = self.semi_supervised_iteration(
                    previous, pseudolabels, refit_ensembles=False
                )
                if store:
                    store.save_links(k, state.links)
            else:
                logger.info(f"Resuming: iteration {k} links loaded from the run directory")
                state = IterationState(k=k, links=links)
            ensembles = store.load_ensembles(k) if store else None
            if ensembles is None:
                state = self.train_ensembles(state)
                if store:
                    store.save_ensembles(k, state.ensembles)
            else:
                state = replace(state, ensembles=ensembles)

            results.append(self.iteration_result(state))
            if store:
                store.save_iteration(results[-1])
            gain = results[-1].validation_arpi - results[-2].validation_arpi
            if convergence_threshold is not None and gain < convergence_threshold:
                logger.info(
                    f"Stopping after iteration {k}: validation ARPI gain {gain:.3f} "
                    f"< {convergence_threshold}"
                )
                break
        return results

