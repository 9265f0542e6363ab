"""Deterministic random streams.

All randomness goes through numpy's Philox-4x64 counter-based generator
(10 rounds, numpy's ``Philox`` defaults). A stream is fully described by its
integer seed, which is what reports record.
"""

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def substream(seed: int, index: int) -> np.random.Generator:
    """An independent stream keyed by (seed, index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))
