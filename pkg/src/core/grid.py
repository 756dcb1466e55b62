"""Raster primitives: masked grids, volumes, masked reductions and the grd1 file format.

A LayerGrid is one task layer at one timestamp. Cells outside the mask hold 0.0 and are
never read by any reduction. Arrays are float64 and read-only once wrapped.
"""

import os
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from core.error_handler import FormatError, ParameterError, StructuralError, UndefinedMetricError

GRID_MAGIC = b"GRD1"
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True, eq=False)
class LayerGrid:
    """2D scalar field with a validity mask (True = valid observation).

    Attributes:
        values: float64 array of shape (height, width)
        mask: bool array of shape (height, width)
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 2:
            raise StructuralError(f"grid values must be 2D, got shape {values.shape}")
        if values.shape != mask.shape:
            raise StructuralError(
                f"values and mask dimensions differ: {values.shape} vs {mask.shape}"
            )
        if not np.all(np.isfinite(values[mask])):
            raise StructuralError("valid cells must hold finite values")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def valid_count(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def from_array(cls, array: np.ndarray) -> "LayerGrid":
        """Build a grid from an array where NaN marks invalid cells."""
        array = np.asarray(array, dtype=np.float64)
        mask = ~np.isnan(array)
        return cls(values=np.where(mask, array, 0.0), mask=mask)

    @classmethod
    def full(cls, height: int, width: int, value: float = 0.0) -> "LayerGrid":
        """All-valid grid filled with ``value``."""
        return cls(values=np.full((height, width), value), mask=np.ones((height, width), bool))

    def to_array(self) -> np.ndarray:
        """Values with NaN at invalid cells."""
        return np.where(self.mask, self.values, np.nan)

    def valid_mean(self, default: float = 0.0) -> float:
        """Mean over valid cells, or ``default`` when none is valid."""
        if not self.mask.any():
            return default
        return float(self.values[self.mask].mean())

    def densified(self) -> "LayerGrid":
        """Copy of this grid with every cell marked valid."""
        return LayerGrid(values=self.values, mask=np.ones(self.shape, dtype=bool))

    def with_mask(self, mask: np.ndarray) -> "LayerGrid":
        return LayerGrid(values=np.where(mask, self.values, 0.0), mask=mask)

    def equals(self, other: "LayerGrid") -> bool:
        """Bit-exact equality of mask and valid values."""
        return (
            self.shape == other.shape
            and bool(np.array_equal(self.mask, other.mask))
            and bool(np.array_equal(self.values[self.mask], other.values[other.mask]))
        )


@dataclass(frozen=True, eq=False)
class Volume:
    """Ordered stack of LayerGrids sharing dimensions.

    The channel order is part of a trained model's identity; ``names`` records it.
    """

    channels: tuple[LayerGrid, ...]
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        channels = tuple(self.channels)
        names = tuple(self.names)
        if not channels:
            raise StructuralError("a volume needs at least one channel")
        if len(names) != len(channels):
            raise StructuralError(f"{len(channels)} channels but {len(names)} names")
        shape = channels[0].shape
        for name, grid in zip(names, channels):
            if grid.shape != shape:
                raise StructuralError(f"channel {name!r} has shape {grid.shape}, expected {shape}")
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "names", names)

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels[0].shape

    def __len__(self) -> int:
        return len(self.channels)

    def values_array(self) -> np.ndarray:
        """Values stacked as (C, H, W)."""
        return np.stack([grid.values for grid in self.channels])

    def mask_array(self) -> np.ndarray:
        """Masks stacked as (C, H, W)."""
        return np.stack([grid.mask for grid in self.channels])

    def to_tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        """(values, masks) as (1, C, H, W) tensors."""
        return stack_volumes([self])

    def reorder(self, names: Sequence[str]) -> "Volume":
        """Volume with channels rearranged to ``names``."""
        index = {name: i for i, name in enumerate(self.names)}
        missing = [name for name in names if name not in index]
        if missing:
            raise StructuralError(f"volume lacks channels {missing}")
        return Volume(tuple(self.channels[index[name]] for name in names), tuple(names))


def stack_volumes(volumes: Sequence[Volume]) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Stack volumes into batch tensors.

    Returns:
        (values, masks) of shape (N, C, H, W); values float64, masks bool
    """
    if not volumes:
        raise StructuralError("no volumes to stack")
    values = torch.from_numpy(np.stack([volume.values_array() for volume in volumes]))
    masks = torch.from_numpy(np.stack([volume.mask_array() for volume in volumes]))
    return values, masks


def stack_targets(targets: Sequence[LayerGrid]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack target grids into (N, 1, H, W) value and mask tensors."""
    values = torch.from_numpy(np.stack([grid.values for grid in targets]))[:, None]
    masks = torch.from_numpy(np.stack([grid.mask for grid in targets]))[:, None]
    return values, masks


def _check_same_shape(a: LayerGrid, b: LayerGrid) -> None:
    if a.shape != b.shape:
        raise StructuralError(f"grid dimensions differ: {a.shape} vs {b.shape}")


def masked_l2(pred: LayerGrid, gt: LayerGrid) -> float:
    """
    Masked L2 score: squared error summed over cells valid in ``gt``, divided by their count.

    Args:
        pred: Prediction grid (its mask is not used)
        gt: Ground truth grid; its mask governs evaluation

    Returns:
        Mean squared error over valid ground-truth cells

    Raises:
        StructuralError: If dimensions differ
        UndefinedMetricError: If ``gt`` has no valid cell
    """
    _check_same_shape(pred, gt)
    count = gt.valid_count
    if count == 0:
        raise UndefinedMetricError("masked L2 is undefined: ground truth has no valid cell")
    diff = pred.values[gt.mask] - gt.values[gt.mask]
    return float(np.sum(diff * diff) / count)


def pixelwise_median(candidates: Sequence[LayerGrid]) -> LayerGrid:
    """
    Per-cell median over the candidates valid at that cell.

    An output cell is valid iff at least one candidate is valid there. With an even
    number of valid values the mean of the two middle values is returned.

    Raises:
        StructuralError: If the list is empty or dimensions differ
    """
    if not candidates:
        raise StructuralError("pixelwise median needs at least one candidate")
    for grid in candidates[1:]:
        _check_same_shape(candidates[0], grid)

    stacked = np.stack([grid.to_array() for grid in candidates])
    mask = np.any(~np.isnan(stacked), axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN cells
        median = np.nanmedian(stacked, axis=0)
    return LayerGrid(values=np.where(mask, median, 0.0), mask=mask)


def normalize_layer(raw: LayerGrid, lo: float, hi: float) -> LayerGrid:
    """
    Map valid cells affinely from [lo, hi] to [0, 1], clamping out-of-range values.

    Raises:
        ParameterError: If lo >= hi
    """
    if not lo < hi:
        raise ParameterError(f"normalization needs lo < hi, got lo={lo}, hi={hi}")
    scaled = np.clip((raw.values - lo) / (hi - lo), 0.0, 1.0)
    return LayerGrid(values=np.where(raw.mask, scaled, 0.0), mask=raw.mask)


# grd1 file format


def encode_grid(grid: LayerGrid) -> bytes:
    """Serialize to grd1: magic, u32 width, u32 height, row-major float32 with NaN for invalid."""
    payload = grid.to_array().astype("<f4").tobytes(order="C")
    return _HEADER.pack(GRID_MAGIC, grid.width, grid.height) + payload


def decode_grid(data: bytes, path: Path | None = None) -> LayerGrid:
    """
    Parse grd1 bytes.

    Raises:
        FormatError: On bad magic or truncation, with the byte offset of the failure
    """
    if len(data) < 4 or data[:4] != GRID_MAGIC:
        raise FormatError("bad grid magic", offset=0, path=path)
    if len(data) < _HEADER.size:
        raise FormatError("truncated grid header", offset=len(data), path=path)
    _, width, height = _HEADER.unpack_from(data)
    expected = _HEADER.size + 4 * width * height
    if len(data) < expected:
        raise FormatError(
            f"truncated grid data: expected {expected} bytes, got {len(data)}",
            offset=len(data),
            path=path,
        )
    if len(data) > expected:
        raise FormatError("trailing bytes after grid data", offset=expected, path=path)
    array = np.frombuffer(data, dtype="<f4", count=width * height, offset=_HEADER.size)
    return LayerGrid.from_array(array.astype(np.float64).reshape(height, width))


def write_grid(path: Path, grid: LayerGrid) -> None:
    """Write a grid atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_grid(grid))
    os.replace(tmp, path)


def read_grid(path: Path) -> LayerGrid:
    """Read a grd1 file."""
    path = Path(path)
    return decode_grid(path.read_bytes(), path=path)
