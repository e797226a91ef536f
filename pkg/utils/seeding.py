"""
Deterministic random streams. Every stream is derived from (seed, entity tag, entity id, round, step),
such that results never depend on the scheduling order of parallel tasks.
"""

import numpy as np


_SEED_OFFSET = 6357396522630986725  # because PyTorch recommends to use a seed "with a lot of 0 and 1 bits"

# Entity tags - one per kind of consumer of random numbers
DATA, PARTITION, INIT, SELECTION, CLIENT, PROBE, HOLDOUT, PERSONALIZE = range(8)


def stream(seed: int, tag: int, entity: int = 0, round_index: int = 0, step: int = 0) -> np.random.Generator:
    """ Returns a fresh generator for the given entity and (round, step) coordinates. """
    if seed < 0:
        raise ValueError("seed must be >= 0 (got {})".format(seed))
    entropy = [_SEED_OFFSET, int(seed), int(tag), int(entity), int(round_index), int(step)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
