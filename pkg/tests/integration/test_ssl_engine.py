"""End-to-end tests of the semi-supervised hypergraph loop on in-memory worlds."""

import numpy as np
import pytest

from core.config import LinkKind
from core.dataset import DatasetSplit
from core.error_handler import ConfigurationError
from core.grid import masked_l2
from core.hypergraph import HyperedgeKind
from core.pseudolabel_store import PseudolabelStore
from core.ssl_engine import AccessAudit, HypergraphEngine
from fixtures.grid_data import fast_ensemble_config, fast_link_config, make_world

pytestmark = pytest.mark.integration


def engine_for(world, seed: int = 0, jobs: int = 1, **kwargs) -> HypergraphEngine:
    kwargs.setdefault("link_config", fast_link_config())
    kwargs.setdefault("ensemble_config", fast_ensemble_config())
    return HypergraphEngine(
        world.topology, world.split, world.source, seed=seed, jobs=jobs, **kwargs
    )


@pytest.fixture(scope="module")
def small_world():
    return make_world(n_labeled=6, n_test=3, n_unlabeled=4, height=6, width=6)


class TestDataIsolation:
    """Fits only read the data they are allowed to."""

    def test_fits_never_read_test_months(self, small_world):
        """No link or teacher fit in any iteration consumes a test timestamp."""
        audit = AccessAudit()
        engine = engine_for(small_world, audit=audit)
        engine.run(2, convergence_threshold=None)

        assert audit.records
        audit.assert_no_access(small_world.split.test)

    def test_supervised_iteration_never_reads_unlabeled(self, small_world):
        """Iteration-1 links and teachers train on S_L alone."""
        audit = AccessAudit()
        engine = engine_for(small_world, audit=audit)
        engine.supervised_state()

        assert audit.accessed("iter1/") == set(small_world.split.labeled)
        audit.assert_no_access(small_world.split.unlabeled, "iter1/")

    def test_second_iteration_links_read_unlabeled(self, small_world):
        """Links of iteration 2 train on S_L plus the pseudolabeled S_U."""
        audit = AccessAudit()
        engine = engine_for(small_world, audit=audit)
        state = engine.supervised_state()
        engine.semi_supervised_iteration(state, engine.generate_pseudolabels(state))

        expected = set(small_world.split.labeled) | set(small_world.split.unlabeled)
        assert audit.accessed("iter2/link/") == expected
        # Teachers keep training on ground truth only.
        assert audit.accessed("iter2/ensemble/") == set(small_world.split.labeled)


class TestDeterminism:
    """Identical inputs and seeds give identical models."""

    def test_same_seed_same_state(self, small_world):
        """Two fresh engines with one seed produce byte-identical iteration states."""
        first = engine_for(small_world, seed=11).supervised_state()
        second = engine_for(small_world, seed=11).supervised_state()

        assert first.state_hash() == second.state_hash()

    def test_parallel_fits_match_sequential(self, small_world):
        """The number of concurrent jobs does not change any trained parameter."""
        link_config = fast_link_config(LinkKind.TINY_CONV)
        sequential = engine_for(small_world, seed=5, jobs=1, link_config=link_config)
        parallel = engine_for(small_world, seed=5, jobs=2, link_config=link_config)

        assert (
            sequential.supervised_state().state_hash()
            == parallel.supervised_state().state_hash()
        )

    def test_different_seed_changes_learned_state(self, small_world):
        """Seeded initialisation reaches the trained parameters of tiny-conv links."""
        link_config = fast_link_config(LinkKind.TINY_CONV)
        first = engine_for(small_world, seed=1, link_config=link_config).initialize_hypergraph()
        second = engine_for(small_world, seed=2, link_config=link_config).initialize_hypergraph()

        assert first.state_hash() != second.state_hash()


class TestInitializeHypergraph:
    """Iteration-1 link training."""

    def test_every_hyperedge_gets_a_link(self, small_world):
        """One trained link per hyperedge of the topology."""
        state = engine_for(small_world).initialize_hypergraph()

        refs = {edge.link_ref for edge in small_world.topology.hyperedges}
        assert set(state.links) == refs
        assert state.k == 1
        assert all(link.is_fitted for link in state.links.values())

    def test_constant_target_is_reproduced(self):
        """Every edge recovers a constant output layer almost exactly."""
        world = make_world(n_labeled=4, n_test=2, n_unlabeled=2, height=5, width=5, constant=0.7)
        engine = engine_for(world)
        state = engine.initialize_hypergraph()
        products = engine.run_products(state, world.split.labeled)

        for timestamp in world.split.labeled:
            for edge in world.topology.hyperedges:
                truth = world.source.get(timestamp, edge.output.name)
                assert masked_l2(products[timestamp][edge.product_key], truth) < 1e-6

    def test_empty_labeled_set_is_rejected(self, small_world):
        """Training without labeled months is a configuration error."""
        split = DatasetSplit(
            labeled=(), test=small_world.split.test, unlabeled=small_world.split.unlabeled
        )
        engine = HypergraphEngine(small_world.topology, split, small_world.source)

        with pytest.raises(ConfigurationError):
            engine.initialize_hypergraph()

    def test_sparse_input_still_trains(self):
        """A half-masked input layer yields links defined over the full grid."""
        world = make_world(
            n_labeled=4, n_test=2, n_unlabeled=2, height=6, width=6, sparse_input=True
        )
        engine = engine_for(world)
        state = engine.initialize_hypergraph()
        products = engine.run_products(state, world.split.test)

        for edge in world.topology.edges_of_kind(HyperedgeKind.E):
            grid = products[world.split.test[0]][edge.product_key]
            assert np.isfinite(grid.values).all()


class TestPseudolabels:
    """Teacher outputs on S_U."""

    def test_pseudolabels_cover_unlabeled_only(self, small_world):
        """One float32 pseudolabel per output node and unlabeled month, with provenance."""
        engine = engine_for(small_world)
        state = engine.supervised_state()
        store = engine.generate_pseudolabels(state)

        assert store.count == len(small_world.outputs) * len(small_world.split.unlabeled)
        for node in small_world.outputs:
            assert store.timestamps(node) == sorted(small_world.split.unlabeled)
            grid = store.get(node, small_world.split.unlabeled[0])
            assert grid.values.dtype == np.float32
            assert grid.mask.all()
        entry = store.entries[0]
        assert entry.provenance.iteration == 1
        assert entry.provenance.topology_hash == small_world.topology.topology_hash()

    def test_pseudolabels_need_teachers(self, small_world):
        """Generating pseudolabels before fitting teachers fails."""
        engine = engine_for(small_world)
        state = engine.initialize_hypergraph()

        with pytest.raises(ConfigurationError):
            engine.generate_pseudolabels(state)

    def test_empty_store_is_rejected(self, small_world):
        """A semi-supervised iteration without pseudolabels is a configuration error."""
        engine = engine_for(small_world)
        state = engine.initialize_hypergraph()

        with pytest.raises(ConfigurationError):
            engine.semi_supervised_iteration(
                state, PseudolabelStore(1, small_world.split.unlabeled)
            )


class TestRun:
    """The iteration driver."""

    def test_supervised_distillation_matches_baseline(self, small_world):
        """At iteration 1 the distilled edge is its own baseline, so every RPI is zero."""
        engine = engine_for(small_world)
        result = engine.run(1)[0]

        assert result.k == 1
        for task in small_world.outputs:
            assert result.distilled[task].evaluation.rpi == pytest.approx(0.0, abs=1e-12)
            assert result.distilled[task].link_ref.startswith("E__")
        assert result.distilled_arpi == pytest.approx(0.0, abs=1e-12)

    def test_default_runs_every_iteration(self, small_world):
        """Without a convergence threshold the loop runs exactly the requested iterations."""
        results = engine_for(small_world).run(3)

        assert [r.k for r in results] == [1, 2, 3]
        for result in results:
            assert set(result.teachers) == set(small_world.outputs)
            assert np.isfinite(result.teacher_arpi)

    def test_huge_threshold_stops_after_second_iteration(self, small_world):
        """A gain that cannot be reached stops the loop after one semi-supervised pass."""
        results = engine_for(small_world).run(4, convergence_threshold=1e9)

        assert len(results) == 2

    def test_mte_rounds(self, small_world):
        """The monolithic baseline reports a supervised and a semi-supervised round."""
        engine = engine_for(small_world)
        engine.supervised_state()
        rounds = engine.evaluate_mte(hidden_channels=4, train_epochs=10)

        assert len(rounds) == 2
        for evaluations in rounds:
            assert set(evaluations) == set(small_world.outputs)
