"""Pytest configuration and shared fixtures."""

import sys
from pathlib import Path

# Add src and tests to path for imports
_tests_path = Path(__file__).parent
_src_path = _tests_path.parent / "src"
for _path in (_src_path, _tests_path):
    if str(_path) not in sys.path:
        sys.path.insert(0, str(_path))

import numpy as np
import pytest

from core.config import SynthConfig
from core.dataset import Manifest
from core.synth_data import generate
from fixtures.grid_data import World, make_world


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for test data."""
    return np.random.default_rng(1234)


@pytest.fixture
def world() -> World:
    """Small in-memory world: 2 inputs, 2 outputs, 8x8 grids."""
    return make_world()


@pytest.fixture(scope="session")
def small_synth_config() -> SynthConfig:
    """Synthetic dataset small enough for end-to-end runs."""
    return SynthConfig(
        width=8,
        height=8,
        months=24,
        n_inputs=2,
        n_outputs=2,
        n_latents=2,
        split_ratio=(12, 4, 8),
        seed=3,
    )


@pytest.fixture(scope="session")
def small_dataset(
    tmp_path_factory: pytest.TempPathFactory, small_synth_config: SynthConfig
) -> Manifest:
    """
    Generate the small synthetic dataset once per session.

    Returns:
        Manifest of the generated dataset
    """
    return generate(small_synth_config, tmp_path_factory.mktemp("synth"))
