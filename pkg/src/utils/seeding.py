"""Seed derivation: every random stream flows from one master seed."""

import hashlib

import numpy as np
import torch


def derive_seed(master_seed: int, phase: str) -> int:
    """
    Derive a phase seed from the master seed.

    The phase name is hashed together with the master seed, so seeds for different
    phases are independent of the order in which phases run.

    Args:
        master_seed: Seed given on the command line
        phase: Phase name such as ``iter2/link/E__NDVI__AOD``

    Returns:
        Non-negative 63-bit seed
    """
    digest = hashlib.sha256(f"{master_seed}:{phase}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def torch_generator(seed: int) -> torch.Generator:
    """Create a CPU generator seeded with ``seed``."""
    generator = torch.Generator(device="cpu")
    generator.manual_seed(seed)
    return generator


def numpy_rng(seed: int) -> np.random.Generator:
    """Create a numpy generator seeded with ``seed``."""
    return np.random.default_rng(seed)
