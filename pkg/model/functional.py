"""
Tape-free numeric functions on logits: entropy, cross-entropy values, predictions.
"""

import numpy as np
import scipy.special


def softmax_entropy(logits) -> float:
    """ Shannon entropy (nats) of Softmax(logits), in [0, ln C]. """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] == 0:
        raise ValueError("softmax_entropy expects a non-empty vector (got shape {})".format(logits.shape))
    return float(softmax_entropies(logits[None, :])[0])


def softmax_entropies(logits) -> np.ndarray:
    """ Row-wise entropies of a (batch, C) logits array, computed in log-space.
    Rows of all-equal logits are exactly ln C (the strict entropy gate must offload them at e_n = ln C). """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if logits.shape[1] == 0:
        raise ValueError("Empty logits rows")
    log_p = scipy.special.log_softmax(logits, axis=1)
    entropies = -np.sum(np.exp(log_p) * log_p, axis=1)
    max_entropy = np.log(logits.shape[1])
    entropies[np.all(logits == logits[:, :1], axis=1)] = max_entropy
    return np.clip(entropies, 0.0, max_entropy)


def cross_entropy(logits, labels) -> float:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    log_p = scipy.special.log_softmax(logits, axis=1)
    return float(-np.mean(log_p[np.arange(labels.shape[0]), labels]))


def predict(logits) -> np.ndarray:
    """ Argmax predictions; ties are won by the lowest class index. """
    return np.argmax(np.atleast_2d(logits), axis=1)


def accuracy(logits, labels) -> float:
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] == 0:
        return float('nan')
    return float(np.mean(predict(logits) == labels))
