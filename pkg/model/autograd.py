"""
Minimal reverse-mode gradient engine (Wengert list) on float64 numpy arrays.

A GradTape records every operation of a forward pass as a node (value, parents, backward function).
Layers (objects with .weights and .bias arrays) are bound to the tape once, so that the gradients
returned by backward(...) are keyed by the layer objects themselves.
A tape is single-use: it can be back-propagated once only.
"""

from typing import Dict, List, Optional, Sequence, Tuple, Callable, NamedTuple, Any

import numpy as np
import scipy.special

from utils.exception import TapeError, ShapeError


class Node:
    """ Handle to a value recorded on a GradTape. """
    __slots__ = ('tape', 'index', 'value')

    def __init__(self, tape: 'GradTape', index: int, value: np.ndarray):
        self.tape, self.index, self.value = tape, index, value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return "Node(#{}, shape={})".format(self.index, self.value.shape)


class LayerGrad(NamedTuple):
    weights: np.ndarray
    bias: np.ndarray


class TapeGradients(NamedTuple):
    layers: Dict[Any, LayerGrad]  # keys are the layer objects bound to the tape
    inputs: List[np.ndarray]  # same order as the 'wrt' nodes


def affine_value(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """ The single expression used for affine layers, with or without a tape (bitwise-identical results). """
    return x @ weights + bias


def relu_value(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


class GradTape:
    def __init__(self):
        self._values: List[np.ndarray] = []
        self._parents: List[Tuple[int, ...]] = []
        self._backward_fns: List[Optional[Callable]] = []
        self._layers: Dict[int, Tuple[Any, Node, Node]] = {}  # id(layer) -> (layer, weights node, bias node)
        self.stop_points = set()
        self._consumed = False

    def __len__(self):
        return len(self._values)

    @property
    def consumed(self):
        return self._consumed

    @property
    def bound_layers(self) -> List[Any]:
        return [v[0] for v in self._layers.values()]

    def _record(self, value, parents: Tuple[Node, ...] = (), backward_fn: Optional[Callable] = None) -> Node:
        if self._consumed:
            raise TapeError("Cannot record new operations on a tape which has already been back-propagated")
        for p in parents:
            self._check_owned(p)
        value = np.asarray(value, dtype=np.float64)
        self._values.append(value)
        self._parents.append(tuple(p.index for p in parents))
        self._backward_fns.append(backward_fn)
        return Node(self, len(self._values) - 1, value)

    def _check_owned(self, node: Node):
        if not isinstance(node, Node) or node.tape is not self:
            raise TapeError("{} was not recorded on this tape".format(node))

    # ------------------------------------------------ Leaves ------------------------------------------------
    def constant(self, value) -> Node:
        return self._record(np.array(value, dtype=np.float64))

    def watch(self, value) -> Node:
        """ Leaf node whose gradient can be requested through backward(..., wrt=[node]). """
        return self._record(np.array(value, dtype=np.float64))

    def as_node(self, x) -> Node:
        return x if isinstance(x, Node) else self.constant(x)

    def bind_layer(self, layer) -> Tuple[Node, Node]:
        """ Returns the (weights, bias) nodes of a layer, recording them on first use. """
        if id(layer) not in self._layers:
            w, b = self.watch(layer.weights), self.watch(layer.bias)
            self._layers[id(layer)] = (layer, w, b)
        _, w, b = self._layers[id(layer)]
        return w, b

    # ----------------------------------------------- Operations ----------------------------------------------
    def affine(self, x: Node, layer) -> Node:
        x = self.as_node(x)
        w, b = self.bind_layer(layer)
        if x.value.shape[-1] != w.value.shape[0]:
            raise ShapeError("Affine layer at depth {} expects input dim {}, got {}"
                             .format(getattr(layer, 'depth_index', '?'), w.value.shape[0], x.value.shape[-1]))
        x_value, w_value = x.value, w.value

        def backward_fn(g):
            x2d, g2d = np.atleast_2d(x_value), np.atleast_2d(g)
            return g @ w_value.T, x2d.T @ g2d, g2d.sum(axis=0)
        return self._record(affine_value(x.value, w.value, b.value), (x, w, b), backward_fn)

    def relu(self, x: Node) -> Node:
        x = self.as_node(x)
        mask = (x.value > 0.0).astype(np.float64)
        return self._record(relu_value(x.value), (x, ), lambda g: (g * mask, ))

    def identity(self, x: Node) -> Node:
        """ Identity in both directions. Stands for the quantizer during back-propagation (straight-through). """
        x = self.as_node(x)
        return self._record(x.value, (x, ), lambda g: (g, ))

    def stop_gradient(self, x: Node) -> Node:
        node = self.identity(x)
        self.insert_stop_point(node)
        return node

    def insert_stop_point(self, node: Node):
        """ Gradients reaching this node are not propagated to its parents. """
        self._check_owned(node)
        self.stop_points.add(node.index)

    def add(self, a: Node, b: Node) -> Node:
        a, b = self.as_node(a), self.as_node(b)
        if a.value.shape != b.value.shape:
            raise ShapeError("Cannot add shapes {} and {}".format(a.value.shape, b.value.shape))
        return self._record(a.value + b.value, (a, b), lambda g: (g, g))

    def scale(self, a: Node, factor: float) -> Node:
        a = self.as_node(a)
        factor = float(factor)
        return self._record(a.value * factor, (a, ), lambda g: (g * factor, ))

    def reduce_sum(self, a: Node) -> Node:
        a = self.as_node(a)
        shape = a.value.shape
        return self._record(np.sum(a.value), (a, ), lambda g: (np.full(shape, g), ))

    def sum_squares(self, a: Node) -> Node:
        a = self.as_node(a)
        a_value = a.value
        return self._record(np.sum(a_value ** 2), (a, ), lambda g: (2.0 * g * a_value, ))

    def cross_entropy(self, logits: Node, labels: np.ndarray) -> Node:
        """ Mean over the batch of -log Softmax(logits)[label]. """
        logits = self.as_node(logits)
        z = np.atleast_2d(logits.value)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if z.shape[0] != labels.shape[0]:
            raise ShapeError("{} logit rows but {} labels".format(z.shape[0], labels.shape[0]))
        n = labels.shape[0]
        rows = np.arange(n)
        log_p = scipy.special.log_softmax(z, axis=1)
        value = -np.mean(log_p[rows, labels])
        p = np.exp(log_p)
        shape = logits.value.shape

        def backward_fn(g):
            d = p.copy()
            d[rows, labels] -= 1.0
            return ((g / n) * d).reshape(shape),
        return self._record(value, (logits, ), backward_fn)

    def contrastive_alignment(self, a: Node, b: Node, indicator: np.ndarray, margin: float) -> Node:
        """ Mean over pairs of I.0.5.|a-b|^2 + (1-I).0.5.max(0, margin-|a-b|)^2 """
        a, b = self.as_node(a), self.as_node(b)
        value, d_diff = contrastive_terms(a.value, b.value, indicator, margin)
        d_diff = d_diff.reshape(a.value.shape)

        def backward_fn(g):
            return g * d_diff, -g * d_diff
        return self._record(value, (a, b), backward_fn)

    # ----------------------------------------------- Backward -----------------------------------------------
    def backward(self, loss: Optional[Node] = None, seeds: Sequence[Tuple[Node, np.ndarray]] = (),
                 wrt: Sequence[Node] = ()) -> TapeGradients:
        """
        Reverse pass from a scalar loss (seeded with 1.0) and/or from explicit output-gradient seeds.

        :returns: gradients of every bound layer (zeros if unreachable), and gradients w.r.t. the wrt nodes.
        """
        if self._consumed:
            raise TapeError("This tape has already been back-propagated")
        if loss is None and len(seeds) == 0:
            raise TapeError("backward requires a loss or at least one seed")
        grads: List[Optional[np.ndarray]] = [None] * len(self._values)

        def accumulate(i, g):
            grads[i] = g if grads[i] is None else grads[i] + g
        if loss is not None:
            self._check_owned(loss)
            if loss.value.shape != ():
                raise TapeError("The loss must be a scalar (got shape {})".format(loss.value.shape))
            accumulate(loss.index, np.array(1.0))
        for node, g in seeds:
            self._check_owned(node)
            g = np.asarray(g, dtype=np.float64)
            if g.shape != node.value.shape:
                raise ShapeError("Seed gradient shape {} does not match node shape {}"
                                 .format(g.shape, node.value.shape))
            accumulate(node.index, g)
        for n in wrt:
            self._check_owned(n)
        self._consumed = True

        for i in range(len(self._values) - 1, -1, -1):
            if grads[i] is None or i in self.stop_points or self._backward_fns[i] is None:
                continue
            parent_grads = self._backward_fns[i](grads[i])
            for p, g in zip(self._parents[i], parent_grads):
                accumulate(p, g)

        def grad_of(node: Node):
            g = grads[node.index]
            return np.zeros_like(node.value) if g is None else g
        layers = {layer: LayerGrad(grad_of(w), grad_of(b)) for layer, w, b in self._layers.values()}
        return TapeGradients(layers, [grad_of(n) for n in wrt])


def contrastive_terms(a: np.ndarray, b: np.ndarray, indicator: np.ndarray, margin: float):
    """ Returns the contrastive alignment loss value, and its gradient w.r.t. a (the gradient w.r.t. b is the
    opposite). The non-differentiable point |a-b| = 0 of negative pairs gets a zero sub-gradient. """
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if a.shape != b.shape:
        raise ShapeError("Feature views must have equal shapes (got {} and {})".format(a.shape, b.shape))
    indicator = np.asarray(indicator, dtype=np.float64).reshape(-1)
    if indicator.shape[0] != a.shape[0]:
        raise ShapeError("Indicator length {} does not match the pair count {}".format(indicator.shape[0], a.shape[0]))
    n = a.shape[0]
    diff = a - b
    dist = np.sqrt(np.sum(diff ** 2, axis=1))
    hinge = np.maximum(0.0, margin - dist)
    value = np.mean(indicator * 0.5 * dist ** 2 + (1.0 - indicator) * 0.5 * hinge ** 2)
    safe_dist = np.where(dist > 0.0, dist, 1.0)
    neg_coef = np.where(dist > 0.0, -hinge / safe_dist, 0.0)
    coef = indicator + (1.0 - indicator) * neg_coef
    return value, (coef[:, None] * diff) / n


def backward(tape: GradTape, loss: Node) -> Dict[Any, LayerGrad]:
    """ Gradients of a scalar loss w.r.t. all layers bound to the tape (zero past any stop point). """
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise TapeError("The loss was not produced on this tape")
    return tape.backward(loss=loss).layers
