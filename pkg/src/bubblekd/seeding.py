"""Deterministic RNG substreams derived from one top-level seed.

Every source of randomness in a run (data shuffling, weight init,
augmentation, dropout, image synthesis) pulls from a named substream so
that two runs differing only in, say, the loss function consume exactly
the same random draws everywhere else.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *names: object) -> int:
    """Map (seed, names...) to a stable 64-bit integer sub-seed."""
    tag = "/".join(str(n) for n in names)
    digest = hashlib.sha256(f"{seed}#{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *names: object) -> np.random.Generator:
    """Independent generator for the named substream of `seed`."""
    return np.random.default_rng(derive_seed(seed, *names))
