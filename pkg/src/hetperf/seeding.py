"""Named random sub-streams derived from a single run seed."""

from __future__ import annotations

import hashlib

import numpy as np
import torch

STREAMS = ("data", "init", "dropout", "shuffle", "env", "explore", "synth", "bootstrap")


def substream(seed: int, name: str) -> int:
    """Stable 63-bit seed for stream ``name``; independent of Python's hash salt."""
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def torch_generator(seed: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(substream(seed, name))


def numpy_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream(seed, name))
