"""Seeded counter-based random streams."""
import numpy as np


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator keyed by ``(seed, *keys)``.

    Streams with different keys are independent, so task ``k`` can be
    regenerated alone with ``make_rng(seed, k)``.
    """
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return np.random.Generator(np.random.Philox(ss))
