"""
Unit tests for hypergraph topology, inference plans and candidate pools.
"""

import pytest

from core.error_handler import ParameterError, StructuralError
from core.hypergraph import (
    HyperedgeKind,
    HypergraphTopology,
    StepKind,
    build_topology,
    candidate_pool,
    inference_plan,
)


@pytest.fixture
def topology() -> HypergraphTopology:
    return build_topology(["A", "B", "C"], ["X", "Y"])


class TestBuildTopology:
    """Test suite for hyperedge construction."""

    def test_family_counts(self, topology):
        """N_i*N_o E, N_o*(N_o-1) EH, N_o AH and N_o CH hyperedges."""
        counts = topology.counts()
        assert counts[HyperedgeKind.E] == 6
        assert counts[HyperedgeKind.EH] == 2
        assert counts[HyperedgeKind.AH] == 2
        assert counts[HyperedgeKind.CH] == 2

    def test_single_output_has_no_eh(self):
        """One output node yields no EH hyperedge."""
        topology = build_topology(["A"], ["X"])
        assert topology.counts()[HyperedgeKind.EH] == 0

    def test_link_refs(self, topology):
        """Link refs name kind, source and output."""
        refs = {edge.link_ref for edge in topology.hyperedges}
        assert {"E__A__X", "EH__Y__X", "AH__X", "CH__Y"} <= refs

    def test_ch_consumes_inputs_and_aggregates(self, topology):
        """CH reads every input node and every AH product."""
        edge = topology.hyperedge("CH__X")
        assert edge.channel_names == (
            "node:A",
            "node:B",
            "node:C",
            "link:AH__X",
            "link:AH__Y",
        )

    def test_rejects_empty_and_duplicate_names(self):
        """Empty lists, bad names and duplicates are rejected."""
        with pytest.raises(ParameterError):
            build_topology([], ["X"])
        with pytest.raises(ParameterError):
            build_topology(["bad name"], ["X"])
        with pytest.raises(StructuralError):
            build_topology(["A"], ["A"])

    def test_manifest_round_trip_and_hash(self, topology):
        """Manifest rebuilds the same topology with the same hash."""
        rebuilt = HypergraphTopology.from_manifest(topology.to_manifest())
        assert rebuilt.topology_hash() == topology.topology_hash()
        assert build_topology(["A"], ["X"]).topology_hash() != topology.topology_hash()

    def test_tampered_manifest_rejected(self, topology):
        """Hyperedges must match the node lists."""
        data = topology.to_manifest()
        data["hyperedges"] = data["hyperedges"][1:]
        with pytest.raises(StructuralError):
            HypergraphTopology.from_manifest(data)


class TestInferencePlan:
    """Test suite for staged execution plans."""

    def test_every_link_once(self, topology):
        """Each hyperedge appears in exactly one link step."""
        plan = inference_plan(topology)
        refs = [step.hyperedge.link_ref for step in plan.link_steps()]
        assert sorted(refs) == sorted(edge.link_ref for edge in topology.hyperedges)

    def test_products_exist_before_consumption(self, topology):
        """No step consumes a product emitted later."""
        available = {f"node:{name}" for name in topology.input_names}
        for step in inference_plan(topology):
            assert set(step.consumes) <= available
            available.add(step.produces)

    def test_stage_one_precedes_stage_two(self, topology):
        """Stages are monotone along the plan."""
        stages = [step.stage for step in inference_plan(topology)]
        assert stages == sorted(stages)

    def test_three_batches(self, topology):
        """Stage-1 links, medians and stage-2 links form three batches."""
        batches = inference_plan(topology).batches()
        assert [batch[0].kind for batch in batches] == [
            StepKind.LINK,
            StepKind.MEDIAN,
            StepKind.LINK,
        ]
        assert len(batches[1]) == 2


class TestCandidatePool:
    """Test suite for ensemble candidate pools."""

    def test_simple_pool(self, topology):
        """E then EH edges into the node."""
        pool = candidate_pool(topology, "X")
        assert [edge.link_ref for edge in pool] == ["E__A__X", "E__B__X", "E__C__X", "EH__Y__X"]

    def test_complex_pool_adds_ah_and_ch(self, topology):
        """Complex pool appends AH and CH."""
        pool = candidate_pool(topology, "X", include_complex=True)
        assert [edge.kind for edge in pool][-2:] == [HyperedgeKind.AH, HyperedgeKind.CH]
        assert len(pool) == 6

    def test_input_node_rejected(self, topology):
        """Pools exist only for output nodes."""
        with pytest.raises(ParameterError):
            candidate_pool(topology, "A")
