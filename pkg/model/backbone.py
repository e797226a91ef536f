"""
Dense multi-exit backbone: the shared layer template, its parameter blocks and exit heads,
and the prefix forward pass (with or without a GradTape).
"""

from typing import Sequence, Tuple, Dict, Optional, Union, List

import numpy as np

from model.autograd import GradTape, Node, affine_value, relu_value
from utils.exception import ShapeError, DepthError


ACTIVATIONS = ('relu', 'linear')


class AffineLayer:
    """ y = x @ weights + bias, with weights of shape (in_dim, out_dim). Instances are never modified in-place:
    training operations return new layers. Layers are hashed by identity (keys of gradient dicts). """
    role = 'layer'

    def __init__(self, depth_index: int, weights: np.ndarray, bias: np.ndarray):
        weights, bias = np.asarray(weights, dtype=np.float64), np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.ndim != 1 or bias.shape[0] != weights.shape[1]:
            raise ShapeError("{} at depth {}: inconsistent weights {} and bias {} shapes"
                             .format(self.role, depth_index, weights.shape, bias.shape))
        self.depth_index = int(depth_index)
        self.weights, self.bias = weights, bias

    @property
    def in_dim(self):
        return self.weights.shape[0]

    @property
    def out_dim(self):
        return self.weights.shape[1]

    @property
    def num_params(self):
        return self.weights.size + self.bias.size

    def with_params(self, weights: np.ndarray, bias: np.ndarray) -> 'AffineLayer':
        """ New layer of the same kind and depth, holding the given arrays. """
        return type(self)(self.depth_index, weights, bias)

    def copy(self) -> 'AffineLayer':
        return self.with_params(self.weights.copy(), self.bias.copy())

    def same_values(self, other: 'AffineLayer') -> bool:
        """ Bitwise equality of kind, depth and parameters. """
        return type(self) is type(other) and self.depth_index == other.depth_index \
            and np.array_equal(self.weights, other.weights) and np.array_equal(self.bias, other.bias)

    def __repr__(self):
        return "{}(depth={}, {}x{})".format(type(self).__name__, self.depth_index, self.in_dim, self.out_dim)


class ParamBlock(AffineLayer):
    role = 'block'


class ExitHead(AffineLayer):
    """ Linear classifier attached after the block of depth depth_index. """
    role = 'head'


class BackboneTemplate:
    def __init__(self, block_dims: Sequence[Tuple[int, int]], exit_set: Sequence[int], num_classes: int,
                 activation='relu'):
        """
        Shared multi-exit layer template, from which all client prefixes, exit heads and the server trunk
        are instantiated.

        :param block_dims: (in_dim, out_dim) of blocks 1..D
        :param exit_set: valid exit (and split) depths, a subset of 1..D-1
        :param activation: 'relu' (default) or 'linear', applied after each block (never after heads)
        """
        self.block_dims = tuple((int(i), int(o)) for i, o in block_dims)
        self.exit_set = tuple(sorted(set(int(k) for k in exit_set)))
        self.num_classes = int(num_classes)
        self.activation = activation
        if len(self.block_dims) == 0:
            raise ValueError("The template must contain at least 1 block")
        for k in range(len(self.block_dims) - 1):
            if self.block_dims[k][1] != self.block_dims[k + 1][0]:
                raise ShapeError("Block dims do not chain: block {} outputs {} but block {} expects {}"
                                 .format(k + 1, self.block_dims[k][1], k + 2, self.block_dims[k + 1][0]))
        if len(self.exit_set) == 0:
            raise DepthError("The exit set must not be empty")
        if self.exit_set[0] < 1 or self.exit_set[-1] > self.depths - 1:
            raise DepthError("Exit depths {} must be in 1..{}".format(self.exit_set, self.depths - 1))
        if self.num_classes < 2:
            raise ValueError("At least 2 classes are required (got {})".format(self.num_classes))
        if activation not in ACTIVATIONS:
            raise ValueError("Unknown activation '{}' (available: {})".format(activation, ACTIVATIONS))

    @staticmethod
    def from_dims(input_dim: int, hidden_dims: Sequence[int], exit_set, num_classes, activation='relu'):
        """ Builds a template whose block k maps dims[k-1] to dims[k], with dims[0] = input_dim. """
        dims = [input_dim] + list(hidden_dims)
        return BackboneTemplate([(dims[k], dims[k + 1]) for k in range(len(hidden_dims))],
                                exit_set, num_classes, activation)

    @property
    def depths(self) -> int:
        return len(self.block_dims)

    @property
    def min_split(self) -> int:
        return self.exit_set[0]

    @property
    def input_dim(self) -> int:
        return self.block_dims[0][0]

    def feature_dim(self, depth: int) -> int:
        """ Dim of the activation after block 'depth' (0 is the input). """
        if not 0 <= depth <= self.depths:
            raise DepthError("Depth {} out of range 0..{}".format(depth, self.depths))
        return self.input_dim if depth == 0 else self.block_dims[depth - 1][1]

    def check_exit_depth(self, depth: int):
        if depth not in self.exit_set:
            raise DepthError("Depth {} is not an exit depth {}".format(depth, self.exit_set))

    def __repr__(self):
        return "BackboneTemplate(D={}, dims={}, exits={}, C={}, {})".format(
            self.depths, self.block_dims, self.exit_set, self.num_classes, self.activation)


def init_blocks(template: BackboneTemplate, depths: Sequence[int], rng: np.random.Generator) -> List[ParamBlock]:
    """ He-normal weights N(0, 2/in_dim), zero biases. """
    blocks = list()
    for d in depths:
        if not 1 <= d <= template.depths:
            raise DepthError("Cannot init block at depth {} (template has {} blocks)".format(d, template.depths))
        n_in, n_out = template.block_dims[d - 1]
        blocks.append(ParamBlock(d, rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)), np.zeros(n_out)))
    return blocks


def init_head(template: BackboneTemplate, depth: int, rng: np.random.Generator) -> ExitHead:
    n_in = template.feature_dim(depth)
    return ExitHead(depth, rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_in, template.num_classes)),
                    np.zeros(template.num_classes))


def init_head_bank(template: BackboneTemplate, rng: np.random.Generator) -> Dict[int, ExitHead]:
    """ One initial head per exit depth, plus the final head (depth D). Clients with the same split depth
    start from the same head. """
    return {d: init_head(template, d, rng) for d in list(template.exit_set) + [template.depths]}


def _activation(value, activation: str, tape: Optional[GradTape]):
    if activation == 'linear':
        return value
    elif activation == 'relu':
        return relu_value(value) if tape is None else tape.relu(value)
    else:
        raise ValueError("Unknown activation '{}'".format(activation))


def forward_blocks(blocks: Sequence[ParamBlock], x: Union[np.ndarray, Node], tape: Optional[GradTape] = None,
                   activation='relu'):
    """ Runs the given blocks in order. Returns an array, or a Node if a tape is given. """
    if tape is not None:
        x = tape.as_node(x)
    for block in blocks:
        in_dim = (x.value if isinstance(x, Node) else x).shape[-1]
        if in_dim != block.in_dim:
            raise ShapeError("Block at depth {} expects input dim {}, got {}".format(block.depth_index, block.in_dim,
                                                                                     in_dim))
        if tape is None:
            x = affine_value(x, block.weights, block.bias)
        else:
            x = tape.affine(x, block)
        x = _activation(x, activation, tape)
    return x


def forward_prefix(blocks: Sequence[ParamBlock], x: Union[np.ndarray, Node], upto_depth: int,
                   tape: Optional[GradTape] = None, activation='relu'):
    """
    Activation after blocks 1..upto_depth. The blocks must start at depth 1 and be contiguous.
    upto_depth = 0 returns x unchanged.
    """
    max_depth = len(blocks)
    for k, block in enumerate(blocks):
        if block.depth_index != k + 1:
            raise DepthError("Prefix blocks must have contiguous depths from 1 (block #{} has depth {})"
                             .format(k, block.depth_index))
    if not 0 <= upto_depth <= max_depth:
        raise DepthError("Cannot run prefix up to depth {}: blocks cover depths 1..{}".format(upto_depth, max_depth))
    if not isinstance(x, Node):
        x = np.asarray(x, dtype=np.float64)
    return forward_blocks(blocks[:upto_depth], x, tape, activation)


def apply_head(head: ExitHead, z: Union[np.ndarray, Node], tape: Optional[GradTape] = None):
    """ Linear exit (no activation). """
    in_dim = (z.value if isinstance(z, Node) else np.asarray(z)).shape[-1]
    if in_dim != head.in_dim:
        raise ShapeError("Head at depth {} expects input dim {}, got {}".format(head.depth_index, head.in_dim, in_dim))
    if tape is None:
        return affine_value(z, head.weights, head.bias)
    return tape.affine(z, head)
