"""Named random substreams derived from a single run seed.

Every source of randomness in a run (data synthesis, weight init, batch
order, augmentation, ...) draws from its own named stream so components can
be re-seeded independently and adding draws to one stream never perturbs
another.
"""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for substream `name` of run seed `seed`."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def sample_seed(seed: int, index: int) -> list:
    """Entropy for per-sample generators: pure function of (seed, index)."""
    return [seed, 0x5A17, index]
