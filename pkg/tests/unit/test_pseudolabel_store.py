"""Unit tests for pseudolabel storage."""

import json

import numpy as np
import pytest

from core.error_handler import ConfigurationError, DataError, FormatError
from core.pseudolabel_store import (
    INDEX_NAME,
    Provenance,
    PseudolabelEntry,
    PseudolabelStore,
    targets_for,
)
from fixtures.grid_data import grid, random_grid

UNLABELED = ("2001-01", "2001-02", "2001-03")


def _entry(node: str, timestamp: str, values, iteration: int = 1) -> PseudolabelEntry:
    return PseudolabelEntry(
        node=node,
        timestamp=timestamp,
        grid=values,
        provenance=Provenance(
            iteration=iteration,
            variant="s-nn-dw",
            candidates=("link:E__A__X", "link:EH__Y__X"),
            topology_hash="abc",
        ),
    )


@pytest.fixture
def store(rng) -> PseudolabelStore:
    store = PseudolabelStore(1, UNLABELED)
    store.add(_entry("X", "2001-02", random_grid(rng, 4, 4)))
    store.add(_entry("X", "2001-01", random_grid(rng, 4, 4, valid_fraction=0.5)))
    store.add(_entry("Y", "2001-01", random_grid(rng, 4, 4)))
    return store


class TestPseudolabelStore:
    """Tests for PseudolabelStore."""

    def test_lookup_and_order(self, store):
        """Entries are ordered by node then timestamp."""
        assert store.count == 3
        assert store.nodes() == ["X", "Y"]
        assert store.timestamps("X") == ["2001-01", "2001-02"]
        assert [(e.node, e.timestamp) for e in store.entries][0] == ("X", "2001-01")
        assert store.get("Y", "2001-03") is None

    def test_rejects_labeled_timestamps(self):
        """Pseudolabels live only on unlabeled timestamps."""
        store = PseudolabelStore(1, UNLABELED)
        with pytest.raises(ConfigurationError):
            store.add(_entry("X", "2000-01", grid([[0.5]])))

    def test_rejects_other_iteration(self):
        """Entries must come from the store's iteration."""
        store = PseudolabelStore(2, UNLABELED)
        with pytest.raises(ConfigurationError):
            store.add(_entry("X", "2001-01", grid([[0.5]]), iteration=1))

    def test_values_quantized_to_storage_precision(self):
        """Stored values equal their float32 rounding."""
        store = PseudolabelStore(1, UNLABELED)
        store.add(_entry("X", "2001-01", grid([[0.1]])))
        assert store.get("X", "2001-01").values[0, 0] == float(np.float32(0.1))

    def test_save_load_round_trip(self, store, tmp_path):
        """A loaded store holds identical grids and provenance."""
        store.save(tmp_path)
        loaded = PseudolabelStore.load(tmp_path)
        assert loaded.iteration == 1
        assert loaded.unlabeled == store.unlabeled
        for original, restored in zip(store.entries, loaded.entries):
            assert original.grid.equals(restored.grid)
            assert original.provenance == restored.provenance

    def test_load_missing_index(self, tmp_path):
        """A directory without an index is a data error."""
        with pytest.raises(DataError):
            PseudolabelStore.load(tmp_path)

    def test_load_missing_grid(self, store, tmp_path):
        """Every grid listed in the index must exist."""
        store.save(tmp_path)
        (tmp_path / "Y" / "2001-01.grd1").unlink()
        with pytest.raises(DataError):
            PseudolabelStore.load(tmp_path)

    def test_load_incompatible_version(self, store, tmp_path):
        """Indexes from another major format version are rejected."""
        store.save(tmp_path)
        index = json.loads((tmp_path / INDEX_NAME).read_text())
        index["format_version"] = "2.0"
        (tmp_path / INDEX_NAME).write_text(json.dumps(index))
        with pytest.raises(FormatError):
            PseudolabelStore.load(tmp_path)

    def test_targets_for(self, store):
        """Only timestamps with a pseudolabel are returned."""
        pairs = targets_for(store, "X", list(UNLABELED))
        assert [t for t, _ in pairs] == ["2001-01", "2001-02"]
