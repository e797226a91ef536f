"""
Base operations on sequences of layers (parameter 'trees'): SGD step, flattening, checksums.
"""
import hashlib
from typing import Sequence, Mapping, List, Any, Dict

import numpy as np

from model.autograd import LayerGrad
from model.backbone import AffineLayer
from utils.exception import KeyMismatchError, ShapeError


def zero_grads(params: Sequence[AffineLayer]) -> Dict[AffineLayer, LayerGrad]:
    return {p: LayerGrad(np.zeros_like(p.weights), np.zeros_like(p.bias)) for p in params}


def select_grads(params: Sequence[AffineLayer], grads: Mapping[Any, LayerGrad]) -> Dict[AffineLayer, LayerGrad]:
    """ Restricts grads to params. Params which did not take part in the computation get zero gradients,
    but grads keyed by a layer that is not in params raise a KeyMismatchError. """
    ids = {id(p) for p in params}
    unknown = [k for k in grads.keys() if id(k) not in ids]
    if len(unknown) > 0:
        raise KeyMismatchError("Gradients were computed for layers which are not part of the params: {}"
                               .format(unknown))
    selected = zero_grads(params)
    selected.update({k: g for k, g in grads.items()})
    return selected


def sgd_step(params: Sequence[AffineLayer], grads: Mapping[Any, LayerGrad], lr: float) -> List[AffineLayer]:
    """ Returns new layers: each parameter decremented by lr x gradient. grads must be keyed by exactly
    the params objects. """
    if lr < 0.0:
        raise ValueError("Learning rate must be >= 0 (got {})".format(lr))
    if len(grads) != len(params) or any(p not in grads for p in params):
        raise KeyMismatchError("Gradients are not keyed identically to params ({} grads, {} params)"
                               .format(len(grads), len(params)))
    updated = list()
    for p in params:
        g = grads[p]
        if g.weights.shape != p.weights.shape or g.bias.shape != p.bias.shape:
            raise ShapeError("Gradient shapes do not match {}".format(p))
        updated.append(p.with_params(p.weights - lr * g.weights, p.bias - lr * g.bias))
    return updated


def copy_layers(params: Sequence[AffineLayer]) -> List[AffineLayer]:
    return [p.copy() for p in params]


def flatten_layers(params: Sequence[AffineLayer]) -> np.ndarray:
    if len(params) == 0:
        return np.zeros((0, ))
    return np.concatenate([np.concatenate([p.weights.ravel(), p.bias.ravel()]) for p in params])


def flatten_grads(params: Sequence[AffineLayer], grads: Mapping[Any, LayerGrad]) -> np.ndarray:
    """ Gradient vector in the same order as flatten_layers(params). """
    if len(params) == 0:
        return np.zeros((0, ))
    return np.concatenate([np.concatenate([grads[p].weights.ravel(), grads[p].bias.ravel()]) for p in params])


def assign_flat(params: Sequence[AffineLayer], vector: np.ndarray) -> List[AffineLayer]:
    """ Inverse of flatten_layers: new layers holding the values of the vector. """
    vector = np.asarray(vector, dtype=np.float64)
    n_total = sum(p.num_params for p in params)
    if vector.shape != (n_total, ):
        raise ShapeError("Expected a vector of {} values, got shape {}".format(n_total, vector.shape))
    new_params, offset = list(), 0
    for p in params:
        w = vector[offset:offset + p.weights.size].reshape(p.weights.shape)
        offset += p.weights.size
        b = vector[offset:offset + p.bias.size].copy()
        offset += p.bias.size
        new_params.append(p.with_params(w.copy(), b))
    return new_params


def parameter_checksum(params: Sequence[AffineLayer]) -> str:
    """ SHA-256 of the raw float64 bytes (and depths/roles) of a sequence of layers. """
    h = hashlib.sha256()
    for p in params:
        h.update("{}:{}:{}x{};".format(p.role, p.depth_index, p.in_dim, p.out_dim).encode('ascii'))
        h.update(np.ascontiguousarray(p.weights, dtype='<f8').tobytes())
        h.update(np.ascontiguousarray(p.bias, dtype='<f8').tobytes())
    return h.hexdigest()

