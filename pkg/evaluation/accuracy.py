"""
Batched evaluation of clients on their held-out data: local (on-device exit) accuracy, fallback accuracy
through the main server at a given offload depth, and hybrid (entropy-gated) accuracy.
"""

import warnings
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from model import functional
from model.client import ClientState, infer
from model.quantization import quantize
from model.server import ServerHandle
from protocol.messages import InferenceFeature


def local_accuracy(client: ClientState, x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    """ :returns: (accuracy of the local exit head on all samples, fraction of samples which would exit locally) """
    if len(y) == 0:
        return float('nan'), float('nan')
    logits = client.local_logits(x)
    exit_rate = float(np.mean(functional.softmax_entropies(logits) < client.entropy_threshold))
    return functional.accuracy(logits, y), exit_rate


def fallback_accuracy(client: ClientState, handle: ServerHandle, x: np.ndarray, y: np.ndarray, depth: int,
                      bits: int, rng: np.random.Generator) -> float:
    """ Accuracy of the server when all samples are offloaded (quantized) at the given depth <= split depth. """
    if len(y) == 0:
        return float('nan')
    z = client.features(x, depth)
    logits = handle.infer(InferenceFeature(quantize(z, bits, rng), depth), client.client_id)
    return functional.accuracy(logits, y)


def hybrid_accuracy(client: ClientState, handle: ServerHandle, x: np.ndarray, y: np.ndarray, bits: int,
                    rng: np.random.Generator) -> Tuple[float, float]:
    """ Sample-by-sample entropy-gated inference. :returns: (accuracy, local exit rate) """
    if len(y) == 0:
        return float('nan'), float('nan')
    predictions, routes = zip(*[infer(client, handle, x[i], bits, rng) for i in range(len(y))])
    return float(np.mean(np.asarray(predictions) == y)), float(np.mean(np.asarray(routes) == 'local'))


def probed_depths(client: ClientState) -> List[int]:
    """ Exit depths at which a client can offload its features. """
    return [k for k in client.template.exit_set if k <= client.split_depth]


def unseen_depths(exit_set: Sequence[int], split_depths: Sequence[int]) -> List[int]:
    """ Exit depths which are never used as any client's split depth. """
    return [k for k in exit_set if k not in set(split_depths)]


def evaluate_clients(clients: Sequence[ClientState], handle: ServerHandle, dataset, holdout, bits: int,
                     rng: np.random.Generator, hybrid=True) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    :param holdout: dict client id -> held-out dataset rows
    :returns: per-client DataFrame (local_acc, exit_rate, hybrid_acc, hybrid_exit_rate),
        and a (client, depth, fallback_acc) DataFrame
    """
    client_rows, fallback_rows = list(), list()
    for c in clients:
        indices = holdout[c.client_id]
        if len(indices) == 0:
            warnings.warn("Client {} has an empty hold-out set: accuracies are NaN".format(c.client_id))
        x, y = dataset.features[indices], dataset.labels[indices]
        local_acc, exit_rate = local_accuracy(c, x, y)
        row = {'client': c.client_id, 'split_depth': c.split_depth, 'n_holdout': len(indices),
               'local_acc': local_acc, 'exit_rate': exit_rate}
        if hybrid:
            row['hybrid_acc'], row['hybrid_exit_rate'] = hybrid_accuracy(c, handle, x, y, bits, rng)
        client_rows.append(row)
        for depth in probed_depths(c):
            fallback_rows.append({'client': c.client_id, 'depth': depth,
                                  'fallback_acc': fallback_accuracy(c, handle, x, y, depth, bits, rng),
                                  'n_holdout': len(indices)})
    fallback_columns = ['client', 'depth', 'fallback_acc', 'n_holdout']
    return pd.DataFrame(client_rows), pd.DataFrame(fallback_rows, columns=fallback_columns)


def fallback_by_depth(fallback_df: pd.DataFrame) -> pd.Series:
    """ Sample-weighted mean fallback accuracy for each probed depth. """
    df = fallback_df[(fallback_df['n_holdout'] > 0)]
    accuracies = dict()
    for depth in sorted(df['depth'].unique()):
        rows = df[df['depth'] == depth]
        accuracies[int(depth)] = float(np.average(rows['fallback_acc'], weights=rows['n_holdout']))
    return pd.Series(accuracies, dtype=np.float64)


def mean_accuracy(client_df: pd.DataFrame, column: str, weighted: Optional[bool] = False) -> float:
    df = client_df[client_df['n_holdout'] > 0]
    if len(df) == 0:
        return float('nan')
    if weighted:
        return float(np.average(df[column], weights=df['n_holdout']))
    return float(df[column].mean())
