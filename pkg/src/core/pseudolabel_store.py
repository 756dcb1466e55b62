"""Pseudolabel storage for one semi-supervised iteration.

Entries are kept in memory and persisted as ``<node>/<timestamp>.grd1`` files plus an
``index.json`` carrying the provenance of every grid.
"""

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from core.config import config
from core.error_handler import ConfigurationError, DataError, FormatError
from core.grid import LayerGrid, read_grid, write_grid
from utils.logger import get_logger
from utils.version import require_compatible_format

logger = get_logger(__name__)

INDEX_NAME = "index.json"


@dataclass(frozen=True)
class Provenance:
    """Identifies the configuration that produced a pseudolabel.

    Attributes:
        iteration: Iteration k whose teachers produced the grid
        variant: Ensemble variant tag
        candidates: Candidate pool, in ensemble channel order
        topology_hash: Hash of the topology manifest
    """

    iteration: int
    variant: str
    candidates: tuple[str, ...]
    topology_hash: str


@dataclass(frozen=True)
class PseudolabelEntry:
    """One teacher output Y_ens for a node at an unlabeled timestamp."""

    node: str
    timestamp: str
    grid: LayerGrid
    provenance: Provenance


class PseudolabelStore:
    """Pseudolabels of iteration ``iteration``, restricted to the unlabeled timestamps."""

    def __init__(self, iteration: int, unlabeled: Iterable[str]):
        """
        Args:
            iteration: Producing iteration k
            unlabeled: S_U; entries for any other timestamp are rejected
        """
        self.iteration = iteration
        self.unlabeled = frozenset(unlabeled)
        self._entries: dict[tuple[str, str], PseudolabelEntry] = {}

    @property
    def entries(self) -> list[PseudolabelEntry]:
        """All entries ordered by (node, timestamp)."""
        return [self._entries[key] for key in sorted(self._entries)]

    @property
    def count(self) -> int:
        return len(self._entries)

    def is_empty(self) -> bool:
        return not self._entries

    def add(self, entry: PseudolabelEntry) -> None:
        """
        Add an entry; values are stored at grd1 precision so saved and live stores agree.

        Raises:
            ConfigurationError: If the timestamp is not unlabeled or the iteration differs
        """
        if entry.timestamp not in self.unlabeled:
            raise ConfigurationError(
                f"pseudolabels exist only for unlabeled timestamps, got {entry.timestamp}"
            )
        if entry.provenance.iteration != self.iteration:
            raise ConfigurationError(
                f"entry from iteration {entry.provenance.iteration} added to store "
                f"of iteration {self.iteration}"
            )
        grid = LayerGrid(values=entry.grid.values.astype(np.float32), mask=entry.grid.mask)
        self._entries[(entry.node, entry.timestamp)] = PseudolabelEntry(
            node=entry.node,
            timestamp=entry.timestamp,
            grid=grid,
            provenance=entry.provenance,
        )

    def get(self, node: str, timestamp: str) -> LayerGrid | None:
        entry = self._entries.get((node, timestamp))
        return None if entry is None else entry.grid

    def timestamps(self, node: str) -> list[str]:
        return sorted(t for (n, t) in self._entries if n == node)

    def nodes(self) -> list[str]:
        return sorted({n for (n, _) in self._entries})

    def save(self, directory: Path) -> None:
        """Write every grid and the index; the index is written last."""
        directory = Path(directory)
        records = []
        for entry in self.entries:
            rel = Path(entry.node) / f"{entry.timestamp}.grd1"
            write_grid(directory / rel, entry.grid)
            provenance = asdict(entry.provenance)
            provenance["candidates"] = list(entry.provenance.candidates)
            records.append(
                {
                    "node": entry.node,
                    "timestamp": entry.timestamp,
                    "path": rel.as_posix(),
                    "provenance": provenance,
                }
            )
        index = {
            "format_version": config.pseudolabel_format_version,
            "iteration": self.iteration,
            "unlabeled": sorted(self.unlabeled),
            "entries": records,
        }
        path = directory / INDEX_NAME
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(index, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)
        logger.debug(f"Saved {len(records)} pseudolabels to {directory}")

    @classmethod
    def load(cls, directory: Path) -> "PseudolabelStore":
        """
        Load a store written by ``save``.

        Raises:
            DataError: If the index or a listed grid is missing
            FormatError: If the index is unreadable or from an incompatible version
        """
        directory = Path(directory)
        path = directory / INDEX_NAME
        if not path.is_file():
            raise DataError("pseudolabel index not found", path=path)
        try:
            index = json.loads(path.read_text(encoding="utf-8"))
            require_compatible_format(
                index.get("format_version"), config.pseudolabel_format_version, "pseudolabel index"
            )
            store = cls(index["iteration"], index["unlabeled"])
            for record in index["entries"]:
                grid_path = directory / record["path"]
                if not grid_path.is_file():
                    raise DataError("pseudolabel grid not found", path=grid_path)
                provenance = dict(record["provenance"])
                provenance["candidates"] = tuple(provenance["candidates"])
                store.add(
                    PseudolabelEntry(
                        node=record["node"],
                        timestamp=record["timestamp"],
                        grid=read_grid(grid_path),
                        provenance=Provenance(**provenance),
                    )
                )
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise FormatError(f"unreadable pseudolabel index: {e}", path=path) from e
        return store


def targets_for(
    store: PseudolabelStore, node: str, timestamps: Sequence[str]
) -> list[tuple[str, LayerGrid]]:
    """(timestamp, pseudolabel) pairs of ``node`` for the timestamps that have one."""
    pairs = []
    for timestamp in timestamps:
        grid = store.get(node, timestamp)
        if grid is not None:
            pairs.append((timestamp, grid))
    return pairs
