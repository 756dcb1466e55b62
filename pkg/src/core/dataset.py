"""Dataset split, manifest ingestion and layer sources.

A dataset directory holds ``manifest.json`` plus grd1 files under ``layers/`` (training-visible
data) and ``hidden/`` (evaluation-only reference values of layers marked unavailable).
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping, Protocol

from core.config import config
from core.error_handler import DataError, FormatError
from core.grid import LayerGrid, read_grid
from utils.logger import get_logger
from utils.version import require_compatible_format

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class DatasetSplit:
    """Labeled, test and unlabeled timestamps with per-(timestamp, layer) availability.

    Attributes:
        labeled: S_L, every output layer available
        test: Evaluation-only timestamps
        unlabeled: S_U, some or all output layers missing
        output_names: Output layers whose availability defines S_L completeness
        availability: (timestamp, layer) -> available; missing keys count as unavailable
    """

    labeled: tuple[str, ...]
    test: tuple[str, ...]
    unlabeled: tuple[str, ...]
    output_names: tuple[str, ...] = ()
    availability: Mapping[tuple[str, str], bool] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("labeled", "test", "unlabeled", "output_names"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        seen: set[str] = set()
        for part in (self.labeled, self.test, self.unlabeled):
            overlap = seen & set(part)
            if overlap:
                raise DataError(f"split lists overlap at {sorted(overlap)}")
            seen |= set(part)
        if self.availability:
            for timestamp in self.labeled:
                missing = [n for n in self.output_names if not self.is_available(timestamp, n)]
                if missing:
                    raise DataError(f"labeled timestamp {timestamp} lacks output layers {missing}")

    def is_available(self, timestamp: str, layer: str) -> bool:
        return bool(self.availability.get((timestamp, layer), False))

    def validation_slice(self, fraction: float) -> tuple[str, ...]:
        """The last ``ceil(fraction * |S_L|)`` labeled timestamps (at least one)."""
        count = max(1, math.ceil(fraction * len(self.labeled)))
        return self.labeled[-count:]

    @property
    def timestamps(self) -> tuple[str, ...]:
        return tuple(sorted(self.labeled + self.test + self.unlabeled))


class LayerSource(Protocol):
    """Serves grids by (timestamp, layer)."""

    def get(self, timestamp: str, layer: str) -> LayerGrid: ...

    def available(self, timestamp: str, layer: str) -> bool: ...

    def reference(self, timestamp: str, layer: str) -> LayerGrid | None: ...


class InMemoryLayerSource:
    """Layer source over a dict; used by tests and benchmarks."""

    def __init__(
        self,
        grids: Mapping[tuple[str, str], LayerGrid],
        references: Mapping[tuple[str, str], LayerGrid] | None = None,
    ):
        self._grids = dict(grids)
        self._references = dict(references or {})

    def get(self, timestamp: str, layer: str) -> LayerGrid:
        try:
            return self._grids[(timestamp, layer)]
        except KeyError:
            raise DataError(f"layer {layer} unavailable at {timestamp}") from None

    def available(self, timestamp: str, layer: str) -> bool:
        return (timestamp, layer) in self._grids

    def reference(self, timestamp: str, layer: str) -> LayerGrid | None:
        return self._references.get((timestamp, layer), self._grids.get((timestamp, layer)))


@dataclass(frozen=True)
class LayerInfo:
    name: str
    kind: str  # "input" | "output"
    mask_style: str


@dataclass(frozen=True)
class Manifest:
    """Parsed dataset manifest; paths are absolute."""

    root: Path
    format_version: str
    layers: tuple[LayerInfo, ...]
    timestamps: tuple[str, ...]
    split: DatasetSplit
    paths: Mapping[tuple[str, str], Path]
    references: Mapping[tuple[str, str], Path]
    config: Mapping[str, Any]

    @property
    def input_names(self) -> tuple[str, ...]:
        return tuple(layer.name for layer in self.layers if layer.kind == "input")

    @property
    def output_names(self) -> tuple[str, ...]:
        return tuple(layer.name for layer in self.layers if layer.kind == "output")

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME


def load_grid(path: Path) -> LayerGrid:
    """
    Read one grd1 grid.

    Raises:
        DataError: If the file does not exist
        FormatError: On bad magic or truncation
    """
    path = Path(path)
    if not path.is_file():
        raise DataError("grid file not found", path=path)
    return read_grid(path)


def load_manifest(path: Path) -> Manifest:
    """
    Load and validate a dataset manifest.

    Args:
        path: Dataset directory or its ``manifest.json``

    Raises:
        DataError: If the manifest or any file it lists is missing, or the split is inconsistent
        FormatError: If the manifest is not valid JSON or has an incompatible version
    """
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest_path.is_file():
        raise DataError("manifest not found", path=manifest_path)
    root = manifest_path.parent
    try:
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"unreadable manifest: {e}", path=manifest_path) from e

    try:
        require_compatible_format(
            data.get("format_version"), config.manifest_format_version, "manifest"
        )
        layers = tuple(
            LayerInfo(name=layer["name"], kind=layer["kind"], mask_style=layer["mask_style"])
            for layer in data["layers"]
        )
        paths: dict[tuple[str, str], Path] = {}
        availability: dict[tuple[str, str], bool] = {}
        for entry in data["entries"]:
            key = (entry["timestamp"], entry["layer"])
            availability[key] = bool(entry["available"])
            if entry["available"]:
                paths[key] = root / entry["path"]
        references = {
            (entry["timestamp"], entry["layer"]): root / entry["path"]
            for entry in data.get("reference", [])
        }
        split_data = data["split"]
        output_names = tuple(layer.name for layer in layers if layer.kind == "output")
        split = DatasetSplit(
            labeled=split_data["labeled"],
            test=split_data["test"],
            unlabeled=split_data["unlabeled"],
            output_names=output_names,
            availability=availability,
        )
        timestamps = tuple(data["timestamps"])
    except KeyError as e:
        raise FormatError(f"manifest lacks field {e}", path=manifest_path) from e

    for file_path in list(paths.values()) + list(references.values()):
        if not file_path.is_file():
            raise DataError("manifest lists a missing file", path=file_path)

    logger.debug(f"Loaded manifest {manifest_path} with {len(timestamps)} timestamps")
    return Manifest(
        root=root,
        format_version=data["format_version"],
        layers=layers,
        timestamps=timestamps,
        split=split,
        paths=paths,
        references=references,
        config=data.get("config", {}),
    )


def dataset_hash(manifest: Manifest) -> str:
    """SHA-256 over the manifest file and every grid it references, in sorted path order."""
    digest = hashlib.sha256(manifest.manifest_path.read_bytes())
    files = sorted(set(manifest.paths.values()) | set(manifest.references.values()))
    for file_path in files:
        digest.update(str(file_path.relative_to(manifest.root)).encode())
        digest.update(file_path.read_bytes())
    return digest.hexdigest()


class ManifestLayerSource:
    """Cached reader of the grids a manifest lists."""

    def __init__(self, manifest: Manifest, cache_size: int | None = 4096):
        self.manifest = manifest
        self._read = lru_cache(maxsize=cache_size)(load_grid)

    def available(self, timestamp: str, layer: str) -> bool:
        return (timestamp, layer) in self.manifest.paths

    def get(self, timestamp: str, layer: str) -> LayerGrid:
        """
        Raises:
            DataError: If the layer is unavailable at the timestamp
        """
        path = self.manifest.paths.get((timestamp, layer))
        if path is None:
            raise DataError(f"layer {layer} unavailable at {timestamp}")
        return self._read(path)

    def reference(self, timestamp: str, layer: str) -> LayerGrid | None:
        """Ground truth for evaluation: the visible grid, else the hidden reference."""
        if self.available(timestamp, layer):
            return self.get(timestamp, layer)
        path = self.manifest.references.get((timestamp, layer))
        return None if path is None else self._read(path)
