"""
Synthetic labeled data (Gaussian mixtures) and non-IID (Dirichlet label-skew) partitioning into client shards.
"""

import pathlib
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from utils.exception import PartitionError


_MAX_PARTITION_ATTEMPTS = 10000


class Dataset:
    def __init__(self, features: np.ndarray, labels: np.ndarray, class_count: int):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2 or labels.ndim != 1 or features.shape[0] != labels.shape[0]:
            raise ValueError("Inconsistent features {} and labels {} shapes".format(features.shape, labels.shape))
        if labels.size > 0 and (labels.min() < 0 or labels.max() >= class_count):
            raise ValueError("Labels must be in 0..{}".format(class_count - 1))
        self.features, self.labels, self.class_count = features, labels, int(class_count)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def class_histogram(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        labels = self.labels if indices is None else self.labels[indices]
        return np.bincount(labels, minlength=self.class_count)

    def __repr__(self):
        return "Dataset(n={}, d={}, C={})".format(len(self), self.dim, self.class_count)


class Shard:
    def __init__(self, owner: int, indices: np.ndarray, weight: float):
        """ Rows of the parent dataset owned by a client, and its aggregation weight (zeta). """
        self.owner = int(owner)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.weight = float(weight)

    def __len__(self):
        return self.indices.shape[0]

    def __repr__(self):
        return "Shard(owner={}, n={}, weight={:.4f})".format(self.owner, len(self), self.weight)


def default_class_means(C: int, d: int, mean_scale: float, rng: np.random.Generator) -> np.ndarray:
    """ mean_scale x orthonormal directions if d >= C, otherwise random directions scaled to norm mean_scale. """
    if d >= C:
        q, _ = np.linalg.qr(rng.normal(size=(d, C)))
        return mean_scale * q.T
    means = rng.normal(size=(C, d))
    return mean_scale * means / np.linalg.norm(means, axis=1, keepdims=True)


def gen_gaussian_mixture(C: int, d: int, n: int, spread: float, seed: Union[int, np.random.Generator],
                         means: Optional[np.ndarray] = None, mean_scale=2.0) -> Dataset:
    """
    Balanced (within +/-1) Gaussian mixture: class c samples are means[c] + spread * N(0, I).

    :param seed: int seed or numpy Generator
    :param means: optional (C, d) array of class means
    """
    if C < 2 or d < 1 or n < C:
        raise ValueError("Invalid sizes: C={} (must be >= 2), d={} (>= 1), n={} (>= C)".format(C, d, n))
    if spread < 0.0:
        raise ValueError("spread must be >= 0 (got {})".format(spread))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if means is None:
        means = default_class_means(C, d, mean_scale, rng)
    means = np.asarray(means, dtype=np.float64)
    if means.shape != (C, d):
        raise ValueError("means must have shape ({}, {}), got {}".format(C, d, means.shape))
    labels = rng.permutation(np.arange(n) % C)
    features = means[labels] + spread * rng.normal(size=(n, d))
    return Dataset(features, labels, C)


def dirichlet_partition(ds: Dataset, N: int, concentration: float,
                        seed: Union[int, np.random.Generator]) -> List[Shard]:
    """
    Per-class proportions across clients ~ Dirichlet(concentration). Draws are repeated until every client
    owns at least 1 sample.
    Weights: zeta_n = |D_n| / sum_i |D_i|
    """
    if N < 1:
        raise ValueError("N must be >= 1 (got {})".format(N))
    if concentration <= 0.0:
        raise ValueError("concentration must be > 0 (got {})".format(concentration))
    if N > len(ds):
        raise PartitionError("Cannot split {} samples into {} non-empty shards".format(len(ds), N))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if N == 1:
        return [Shard(0, np.arange(len(ds)), 1.0)]
    class_indices = [np.flatnonzero(ds.labels == c) for c in range(ds.class_count)]
    for attempt in range(_MAX_PARTITION_ATTEMPTS):
        client_indices = [list() for _ in range(N)]
        for idx_c in class_indices:
            if idx_c.shape[0] == 0:
                continue
            idx_c = rng.permutation(idx_c)
            proportions = rng.dirichlet(np.full(N, concentration))
            cuts = (np.cumsum(proportions) * idx_c.shape[0]).astype(int)[:-1]
            for n, part in enumerate(np.split(idx_c, cuts)):
                client_indices[n].append(part)
        sizes = [sum(p.shape[0] for p in parts) for parts in client_indices]
        if min(sizes) >= 1:
            total = float(sum(sizes))
            return [Shard(n, np.sort(np.concatenate(parts)), sizes[n] / total)
                    for n, parts in enumerate(client_indices)]
    raise PartitionError("Could not draw a partition with non-empty shards after {} attempts (N={}, "
                         "concentration={})".format(_MAX_PARTITION_ATTEMPTS, N, concentration))


def export_dataset_csv(ds: Dataset, shards: Sequence[Shard], path: Union[str, pathlib.Path]):
    """ Features, label and owner columns; same CSV dialect as the metrics file. """
    owners = np.full(len(ds), -1, dtype=np.int64)
    for s in shards:
        owners[s.indices] = s.owner
    df = pd.DataFrame(ds.features, columns=['x{}'.format(i) for i in range(ds.dim)])
    df['label'] = ds.labels
    df['owner'] = owners
    df.to_csv(path, index=False, float_format='%.17g')
