"""Deterministic, splittable random-number streams.

Every stochastic routine in the package draws from a counter-based Philox
generator keyed by ``(seed, *path)`` where ``path`` is a tuple of small
integers identifying the consumer (domain tag, replicate, subject index,
imputation index, ...).  The same key always yields the same stream, and
distinct keys yield statistically independent streams, so replicates and
imputations can run in any order (or in parallel) without changing results.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep unrelated consumers of the same (seed, replicate) apart.
DOMAIN_COHORT = 1
DOMAIN_SUBJECT = 2
DOMAIN_IMPUTE = 3


def seed_sequence(seed: int, *path: int) -> np.random.SeedSequence:
    """SeedSequence for the stream identified by ``(seed, *path)``."""
    entropy = (int(seed) & 0xFFFFFFFFFFFFFFFF,) + tuple(int(p) for p in path)
    if any(p < 0 for p in entropy[1:]):
        raise ValueError("stream path components must be non-negative")
    return np.random.SeedSequence(entropy)


def stream(seed: int, *path: int) -> np.random.Generator:
    """Philox generator for the stream identified by ``(seed, *path)``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *path)))


def substream(seq: np.random.SeedSequence, *path: int) -> np.random.Generator:
    """Philox generator derived from an existing SeedSequence plus extra path."""
    entropy = tuple(np.atleast_1d(seq.entropy).tolist()) + tuple(int(p) for p in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
