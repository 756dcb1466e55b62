"""Hypergraph topology: task nodes, typed hyperedges, staged inference plans and candidate pools."""

import hashlib
import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterator, Sequence

from core.config import config
from core.error_handler import ParameterError, StructuralError
from utils.version import require_compatible_format

_NAME_PATTERN = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


class NodeKind(str, Enum):
    INPUT = "input"
    OUTPUT = "output"


class HyperedgeKind(str, Enum):
    """Hyperedge types, in candidate-pool order."""

    E = "E"  # single input node -> output node
    EH = "EH"  # median of another output's E predictions -> output node
    AH = "AH"  # all input nodes -> output node
    CH = "CH"  # all input nodes + all AH products -> output node


KIND_ORDER = {kind: i for i, kind in enumerate(HyperedgeKind)}


class SourceKind(str, Enum):
    NODE = "node"  # an input node layer
    MEDIAN = "median"  # stage-1 pixelwise median of E predictions into a node
    AGGREGATE = "aggregate"  # stage-1 AH prediction for a node


@dataclass(frozen=True)
class NodeId:
    """A task node."""

    kind: NodeKind
    index: int
    name: str


@dataclass(frozen=True)
class SourceRef:
    """Where a hyperedge input channel comes from."""

    kind: SourceKind
    name: str  # node name

    @property
    def key(self) -> str:
        """Product key used by the inference plan."""
        if self.kind is SourceKind.NODE:
            return f"node:{self.name}"
        if self.kind is SourceKind.MEDIAN:
            return f"median:{self.name}"
        return f"link:{HyperedgeKind.AH.value}__{self.name}"


@dataclass(frozen=True)
class HyperedgeSpec:
    """One hyperedge and the link it owns.

    Attributes:
        kind: Hyperedge type
        inputs: Ordered input sources (channel order of the link)
        output: Output node
        stage: 1 or 2
        link_ref: Identifier of the owned LinkModel
    """

    kind: HyperedgeKind
    inputs: tuple[SourceRef, ...]
    output: NodeId
    stage: int
    link_ref: str

    @property
    def product_key(self) -> str:
        return f"link:{self.link_ref}"

    @property
    def channel_names(self) -> tuple[str, ...]:
        return tuple(source.key for source in self.inputs)


def link_ref_for(kind: HyperedgeKind, output: str, source: str | None = None) -> str:
    if source is None:
        return f"{kind.value}__{output}"
    return f"{kind.value}__{source}__{output}"


@dataclass(frozen=True)
class HypergraphTopology:
    """Nodes and hyperedges of a two-stage multi-task hypergraph."""

    input_nodes: tuple[NodeId, ...]
    output_nodes: tuple[NodeId, ...]
    hyperedges: tuple[HyperedgeSpec, ...]

    @property
    def input_names(self) -> tuple[str, ...]:
        return tuple(node.name for node in self.input_nodes)

    @property
    def output_names(self) -> tuple[str, ...]:
        return tuple(node.name for node in self.output_nodes)

    def node(self, name: str) -> NodeId:
        for node in self.input_nodes + self.output_nodes:
            if node.name == name:
                return node
        raise ParameterError(f"unknown node {name!r}")

    def hyperedge(self, link_ref: str) -> HyperedgeSpec:
        for edge in self.hyperedges:
            if edge.link_ref == link_ref:
                return edge
        raise ParameterError(f"unknown link {link_ref!r}")

    def edges_of_kind(self, kind: HyperedgeKind) -> tuple[HyperedgeSpec, ...]:
        return tuple(edge for edge in self.hyperedges if edge.kind is kind)

    def counts(self) -> dict[HyperedgeKind, int]:
        return {kind: len(self.edges_of_kind(kind)) for kind in HyperedgeKind}

    def to_manifest(self) -> dict[str, Any]:
        """JSON-ready manifest: node lists, hyperedge records, format version."""
        return {
            "format_version": config.topology_format_version,
            "input_nodes": list(self.input_names),
            "output_nodes": list(self.output_names),
            "hyperedges": [
                {
                    "kind": edge.kind.value,
                    "inputs": [{"kind": s.kind.value, "name": s.name} for s in edge.inputs],
                    "output": edge.output.name,
                    "stage": edge.stage,
                    "link_ref": edge.link_ref,
                }
                for edge in self.hyperedges
            ],
        }

    @classmethod
    def from_manifest(cls, data: dict[str, Any]) -> "HypergraphTopology":
        """Rebuild a topology and check it against a fresh build of the same nodes."""
        require_compatible_format(
            data.get("format_version"), config.topology_format_version, "topology"
        )
        topology = build_topology(data["input_nodes"], data["output_nodes"])
        if topology.to_manifest()["hyperedges"] != data["hyperedges"]:
            raise StructuralError("topology manifest hyperedges do not match the node lists")
        return topology

    def topology_hash(self) -> str:
        canonical = json.dumps(self.to_manifest(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def _validate_names(names: Sequence[str], what: str) -> None:
    if not names:
        raise ParameterError(f"{what} list must not be empty")
    for name in names:
        if not isinstance(name, str) or not _NAME_PATTERN.match(name):
            raise ParameterError(f"invalid {what} name {name!r}")


def build_topology(input_names: Sequence[str], output_names: Sequence[str]) -> HypergraphTopology:
    """
    Build the four hyperedge families over the given nodes.

    Ordering: E by (output, input), EH by (output, source output), AH by output,
    CH by output. Node order is the order of the given lists.

    Args:
        input_names: Names of always-available input layers
        output_names: Names of the layers to predict

    Returns:
        Topology with N_i*N_o E, N_o*(N_o-1) EH, N_o AH and N_o CH hyperedges

    Raises:
        ParameterError: On empty lists or invalid names
        StructuralError: On duplicate names
    """
    _validate_names(input_names, "input")
    _validate_names(output_names, "output")
    all_names = list(input_names) + list(output_names)
    if len(set(all_names)) != len(all_names):
        raise StructuralError(f"node names must be unique, got {all_names}")

    inputs = tuple(NodeId(NodeKind.INPUT, i, name) for i, name in enumerate(input_names))
    outputs = tuple(NodeId(NodeKind.OUTPUT, i, name) for i, name in enumerate(output_names))
    input_sources = tuple(SourceRef(SourceKind.NODE, node.name) for node in inputs)

    edges: list[HyperedgeSpec] = []
    for out in outputs:
        for node in inputs:
            edges.append(
                HyperedgeSpec(
                    kind=HyperedgeKind.E,
                    inputs=(SourceRef(SourceKind.NODE, node.name),),
                    output=out,
                    stage=1,
                    link_ref=link_ref_for(HyperedgeKind.E, out.name, node.name),
                )
            )
    for out in outputs:
        for other in outputs:
            if other == out:
                continue
            edges.append(
                HyperedgeSpec(
                    kind=HyperedgeKind.EH,
                    inputs=(SourceRef(SourceKind.MEDIAN, other.name),),
                    output=out,
                    stage=2,
                    link_ref=link_ref_for(HyperedgeKind.EH, out.name, other.name),
                )
            )
    for out in outputs:
        edges.append(
            HyperedgeSpec(
                kind=HyperedgeKind.AH,
                inputs=input_sources,
                output=out,
                stage=1,
                link_ref=link_ref_for(HyperedgeKind.AH, out.name),
            )
        )
    aggregate_sources = tuple(SourceRef(SourceKind.AGGREGATE, node.name) for node in outputs)
    for out in outputs:
        edges.append(
            HyperedgeSpec(
                kind=HyperedgeKind.CH,
                inputs=input_sources + aggregate_sources,
                output=out,
                stage=2,
                link_ref=link_ref_for(HyperedgeKind.CH, out.name),
            )
        )

    return HypergraphTopology(input_nodes=inputs, output_nodes=outputs, hyperedges=tuple(edges))


class StepKind(str, Enum):
    LINK = "link"
    MEDIAN = "median"


@dataclass(frozen=True)
class PlanStep:
    """One execution step: run a link, or take the pixelwise median of E predictions."""

    kind: StepKind
    stage: int
    consumes: tuple[str, ...]
    produces: str
    hyperedge: HyperedgeSpec | None = None
    node: NodeId | None = None


@dataclass(frozen=True)
class InferencePlan:
    """Ordered execution steps; stage-1 steps strictly precede stage-2 steps."""

    steps: tuple[PlanStep, ...]

    def __iter__(self) -> Iterator[PlanStep]:
        return iter(self.steps)

    def __len__(self) -> int:
        return len(self.steps)

    def batches(self) -> list[tuple[PlanStep, ...]]:
        """Consecutive steps of the same stage and kind; steps within a batch are independent."""
        groups: list[list[PlanStep]] = []
        for step in self.steps:
            if groups and (groups[-1][0].stage, groups[-1][0].kind) == (step.stage, step.kind):
                groups[-1].append(step)
            else:
                groups.append([step])
        return [tuple(group) for group in groups]

    def link_steps(self, stage: int | None = None) -> tuple[PlanStep, ...]:
        return tuple(
            step
            for step in self.steps
            if step.kind is StepKind.LINK and (stage is None or step.stage == stage)
        )


def inference_plan(topology: HypergraphTopology) -> InferencePlan:
    """
    Stage-ordered plan: E links, AH links, per-output medians, then EH and CH links.

    Every link appears exactly once and no step consumes a product emitted later.
    """
    steps: list[PlanStep] = []

    def link_step(edge: HyperedgeSpec) -> PlanStep:
        return PlanStep(
            kind=StepKind.LINK,
            stage=edge.stage,
            consumes=edge.channel_names,
            produces=edge.product_key,
            hyperedge=edge,
        )

    for edge in topology.edges_of_kind(HyperedgeKind.E):
        steps.append(link_step(edge))
    for edge in topology.edges_of_kind(HyperedgeKind.AH):
        steps.append(link_step(edge))
    for node in topology.output_nodes:
        e_products = tuple(
            edge.product_key
            for edge in topology.edges_of_kind(HyperedgeKind.E)
            if edge.output == node
        )
        steps.append(
            PlanStep(
                kind=StepKind.MEDIAN,
                stage=1,
                consumes=e_products,
                produces=SourceRef(SourceKind.MEDIAN, node.name).key,
                node=node,
            )
        )
    for edge in topology.edges_of_kind(HyperedgeKind.EH):
        steps.append(link_step(edge))
    for edge in topology.edges_of_kind(HyperedgeKind.CH):
        steps.append(link_step(edge))

    return InferencePlan(steps=tuple(steps))


def candidate_pool(
    topology: HypergraphTopology, node: NodeId | str, include_complex: bool = False
) -> tuple[HyperedgeSpec, ...]:
    """
    Candidate producers for an output node, ordered by (kind, source).

    Without complex hyperedges: every E and EH into the node. With them: also its AH and CH.

    Raises:
        ParameterError: If the node is not an output node
    """
    if isinstance(node, str):
        node = topology.node(node)
    if node.kind is not NodeKind.OUTPUT or node not in topology.output_nodes:
        raise ParameterError(f"candidate pools exist only for output nodes, got {node.name!r}")

    kinds = [HyperedgeKind.E, HyperedgeKind.EH]
    if include_complex:
        kinds += [HyperedgeKind.AH, HyperedgeKind.CH]
    pool = [edge for edge in topology.hyperedges if edge.output == node and edge.kind in kinds]
    return tuple(sorted(pool, key=lambda edge: KIND_ORDER[edge.kind]))
