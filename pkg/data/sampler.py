"""
Samplers for client shards: held-out split, and mini-batches drawn from the training part of a shard.
"""

from typing import Iterator, Tuple

import numpy as np

from data.synthdata import Shard


def split_holdout(shard: Shard, holdout_proportion: float, rng: np.random.Generator) -> Tuple[Shard, np.ndarray]:
    """
    Separates a shard into a training shard (same owner and weight) and held-out indices.
    The training part always keeps at least 1 sample.
    """
    if not 0.0 <= holdout_proportion < 1.0:
        raise ValueError("holdout_proportion must be in [0, 1) (got {})".format(holdout_proportion))
    indexes = rng.permutation(shard.indices)  # not in-place
    first_holdout_idx = max(1, int(np.floor(len(indexes) * (1.0 - holdout_proportion))))
    train_indexes, holdout_indexes = np.split(indexes, [first_holdout_idx])
    return Shard(shard.owner, np.sort(train_indexes), shard.weight), np.sort(holdout_indexes)


def sample_batch(indices: np.ndarray, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """ Batch of row indices, without replacement (with replacement if the shard is smaller than the batch). """
    if len(indices) == 0:
        raise ValueError("Cannot sample a batch from an empty shard")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1 (got {})".format(batch_size))
    return rng.choice(indices, size=batch_size, replace=batch_size > len(indices))


def iterate_minibatches(indices: np.ndarray, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """ One shuffled pass over all indices. The last batch may be smaller. """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1 (got {})".format(batch_size))
    shuffled = rng.permutation(indices)
    for start in range(0, len(shuffled), batch_size):
        yield shuffled[start:start + batch_size]
