"""Synthetic NEO-like dataset generator.

A handful of latent smooth spatial fields carry a seasonal cycle and a slow drift. Every
layer is a distinct smooth nonlinear mixture of the same latents, so output layers are
predictable from inputs while single inputs only carry part of the signal.
"""

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from core.config import DEFAULT_INPUT_NAMES, DEFAULT_OUTPUT_NAMES, SynthConfig, config
from core.dataset import MANIFEST_NAME, Manifest, load_manifest
from core.grid import LayerGrid, write_grid
from utils.logger import get_logger
from utils.seeding import derive_seed, numpy_rng

logger = get_logger(__name__)

_WAVES_PER_FIELD = 3
_SPARSE_DROPOUT = 0.05


def timestamp_for(start_year: int, month: int) -> str:
    """``YYYY-MM`` label of month index ``month`` counted from January of ``start_year``."""
    return f"{start_year + month // 12:04d}-{month % 12 + 1:02d}"


def layer_names(n_inputs: int, n_outputs: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """NEO-like names, falling back to IN{k} / OUT{k} beyond the built-in lists."""

    def names(defaults: tuple[str, ...], prefix: str, count: int) -> tuple[str, ...]:
        return tuple(defaults[k] if k < len(defaults) else f"{prefix}{k}" for k in range(count))

    inputs = names(DEFAULT_INPUT_NAMES, "IN", n_inputs)
    return inputs, names(DEFAULT_OUTPUT_NAMES, "OUT", n_outputs)


def smooth_field(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Sum of low-frequency plane waves, scaled to unit peak amplitude."""
    y, x = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    field = np.zeros((height, width))
    for _ in range(_WAVES_PER_FIELD):
        fx, fy = rng.integers(1, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * (fx * x + fy * y) + phase)
    return field / np.abs(field).max()


@dataclass
class _Mixture:
    """Layer = sigmoid(gain * (w . latents + v * latent_a * latent_b) + offset)."""

    weights: np.ndarray
    interaction: float
    pair: tuple[int, int]
    gain: float
    offset: float

    @classmethod
    def random(cls, rng: np.random.Generator, n_latents: int) -> "_Mixture":
        weights = rng.normal(0.0, 1.0, size=n_latents)
        weights /= np.linalg.norm(weights)
        pair = tuple(int(i) for i in rng.integers(0, n_latents, size=2))
        return cls(
            weights=weights,
            interaction=float(rng.uniform(-0.6, 0.6)),
            pair=(pair[0], pair[1]),
            gain=float(rng.uniform(1.2, 2.0)),
            offset=float(rng.uniform(-0.3, 0.3)),
        )

    def apply(self, latents: np.ndarray) -> np.ndarray:
        linear = np.tensordot(self.weights, latents, axes=1)
        cross = self.interaction * latents[self.pair[0]] * latents[self.pair[1]]
        return 1.0 / (1.0 + np.exp(-(self.gain * (linear + cross) + self.offset)))


class SyntheticWorld:
    """Deterministic latent dynamics and layer mixtures for one SynthConfig."""

    def __init__(self, synth: SynthConfig):
        self.synth = synth
        rng = numpy_rng(derive_seed(synth.seed, "synth"))
        h, w, n = synth.height, synth.width, synth.n_latents
        self.base = np.stack([smooth_field(rng, h, w) for _ in range(n)])
        self.season = np.stack([smooth_field(rng, h, w) for _ in range(n)])
        self.season_phase = rng.uniform(0, 2 * np.pi, size=n)
        self.drift_direction = rng.choice([-1.0, 1.0], size=n)
        self.mixtures = [
            _Mixture.random(rng, n) for _ in range(synth.n_inputs + synth.n_outputs)
        ]
        self.land = smooth_field(rng, h, w) > 0.0
        self.noise_seed = derive_seed(synth.seed, "synth/noise")

    def latents(self, month: int) -> np.ndarray:
        """Latent fields at ``month``; periodic in the season and drifting with ``drift_rate``."""
        p = self.synth.seasonal_period
        angle = 2 * np.pi * (month % p) / p + self.season_phase
        drift = self.synth.drift_rate * month
        amplitude = 1.0 + 2.0 * drift
        shift = drift * self.drift_direction
        return (
            self.base
            + amplitude * np.sin(angle)[:, None, None] * self.season
            + shift[:, None, None]
        )

    def layer_values(self, month: int) -> np.ndarray:
        """(n_inputs + n_outputs, H, W) noiseless values in (0, 1)."""
        latents = self.latents(month)
        return np.stack([mixture.apply(latents) for mixture in self.mixtures])

    def mask(self, style: str, layer: int, month: int) -> np.ndarray:
        """Validity of a layer; sparse styles lose a seasonal pattern of scattered cells."""
        if style == "dense":
            return np.ones_like(self.land)
        phase = f"synth/mask/{layer}/{month % self.synth.seasonal_period}"
        rng = numpy_rng(derive_seed(self.synth.seed, phase))
        region = self.land if style == "land-sparse" else ~self.land
        return region & (rng.uniform(size=region.shape) >= _SPARSE_DROPOUT)


def generate(synth: SynthConfig, out_dir: Path) -> Manifest:
    """
    Write a synthetic dataset and its manifest.

    The months are split chronologically into labeled, test and unlabeled parts. Output
    layers of unlabeled months are marked unavailable; their values go to ``hidden/`` as
    evaluation-only reference.

    Args:
        synth: Generator configuration
        out_dir: Dataset directory (created if needed)

    Returns:
        The loaded manifest of the new dataset
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = SyntheticWorld(synth)
    inputs, outputs = layer_names(synth.n_inputs, synth.n_outputs)
    names = inputs + outputs
    styles = synth.layer_mask_styles()
    n_labeled, n_test, _ = synth.split_counts()
    timestamps = [timestamp_for(synth.start_year, m) for m in range(synth.months)]
    labeled = timestamps[:n_labeled]
    test = timestamps[n_labeled : n_labeled + n_test]
    unlabeled = timestamps[n_labeled + n_test :]
    unlabeled_set = set(unlabeled)

    logger.info(
        f"Generating {synth.months} months of {len(names)} layers at "
        f"{synth.width}x{synth.height} into {out_dir}"
    )
    rng = numpy_rng(world.noise_seed)
    entries = []
    reference = []
    for month, timestamp in enumerate(timestamps):
        values = world.layer_values(month)
        for k, name in enumerate(names):
            layer = values[k]
            if synth.noise_sigma > 0:
                layer = layer + rng.normal(0.0, synth.noise_sigma, size=layer.shape)
            layer = np.clip(layer, 0.0, 1.0)
            mask = world.mask(styles[k], k, month)
            # Stored as float32; quantize now so on-disk and in-memory grids agree.
            grid = LayerGrid(values=np.where(mask, layer, 0.0).astype(np.float32), mask=mask)
            hidden = name in outputs and timestamp in unlabeled_set
            rel = Path("hidden" if hidden else "layers") / name / f"{timestamp}.grd1"
            write_grid(out_dir / rel, grid)
            if hidden:
                reference.append({"timestamp": timestamp, "layer": name, "path": rel.as_posix()})
                entries.append(
                    {"timestamp": timestamp, "layer": name, "path": None, "available": False}
                )
            else:
                entries.append(
                    {
                        "timestamp": timestamp,
                        "layer": name,
                        "path": rel.as_posix(),
                        "available": True,
                    }
                )

    manifest = {
        "format_version": config.manifest_format_version,
        "config": asdict(synth),
        "layers": [
            {"name": name, "kind": "input" if name in inputs else "output", "mask_style": style}
            for name, style in zip(names, styles)
        ],
        "timestamps": timestamps,
        "split": {"labeled": labeled, "test": test, "unlabeled": unlabeled},
        "entries": entries,
        "reference": reference,
    }
    path = out_dir / MANIFEST_NAME
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)
    logger.info(
        f"Wrote {path}: {len(labeled)} labeled, {len(test)} test, {len(unlabeled)} unlabeled months"
    )
    return load_manifest(path)
