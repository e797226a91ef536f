"""
One simulated client: prefix phi_n (blocks 1..split_depth), exit head h_n, entropy threshold e_n.
Two-branch cross-batch adaptation, feature views, first-order meta (FOMAML) outer update,
entropy-gated inference and final personalization.

Client states are never modified in-place: operations return new states.
"""

from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from data.sampler import iterate_minibatches
from data.synthdata import Dataset, Shard
from model import functional
from model.autograd import GradTape, Node, backward
from model.backbone import BackboneTemplate, ParamBlock, ExitHead, forward_prefix, apply_head
from model.base import sgd_step, select_grads, copy_layers
from model.quantization import quantize
from protocol.messages import FeaturePair, TaskFeature, InferenceFeature, Indicator
from utils import seeding
from utils.exception import DepthError, ShapeError, TapeError, ServerUnreachableError


class Batch(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    indices: np.ndarray  # rows of the parent dataset (provenance)

    @staticmethod
    def from_dataset(ds: Dataset, indices: np.ndarray) -> 'Batch':
        indices = np.asarray(indices, dtype=np.int64)
        return Batch(ds.features[indices], ds.labels[indices], indices)

    def __len__(self):
        return self.y.shape[0]


class AdaptConfig:
    def __init__(self, inner_lr=0.05, inner_steps=1, batch_size=32):
        if inner_lr < 0.0:
            raise ValueError("inner_lr must be >= 0 (got {})".format(inner_lr))
        if inner_steps < 0:
            raise ValueError("inner_steps must be >= 0 (got {})".format(inner_steps))
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1 (got {})".format(batch_size))
        self.inner_lr = inner_lr  # alpha
        self.inner_steps = inner_steps  # S
        self.batch_size = batch_size


class ClientState:
    def __init__(self, client_id: int, template: BackboneTemplate, prefix: Sequence[ParamBlock], head: ExitHead,
                 split_depth: int, entropy_threshold: float, shard: Shard, seed: int):
        self.client_id = int(client_id)
        self.template = template
        self.prefix, self.head = list(prefix), head
        self.split_depth = int(split_depth)
        self.entropy_threshold = float(entropy_threshold)
        self.shard = shard
        self.seed = int(seed)
        template.check_exit_depth(self.split_depth)
        if len(self.prefix) != self.split_depth or any(b.depth_index != k + 1 for k, b in enumerate(self.prefix)):
            raise DepthError("Client {}: prefix depths must be contiguous from 1 to {}".format(client_id, split_depth))
        if head.depth_index != self.split_depth or head.in_dim != template.feature_dim(self.split_depth):
            raise ShapeError("Client {}: the exit head does not match split depth {}".format(client_id, split_depth))
        if self.entropy_threshold < 0.0:
            raise ValueError("Client {}: entropy threshold must be >= 0".format(client_id))

    @property
    def params(self) -> List:
        """ phi_n then h_n """
        return self.prefix + [self.head]

    def with_params(self, prefix: Sequence[ParamBlock], head: ExitHead) -> 'ClientState':
        return ClientState(self.client_id, self.template, prefix, head, self.split_depth, self.entropy_threshold,
                           self.shard, self.seed)

    def rng_stream(self, round_index: int, step: int) -> np.random.Generator:
        """ Per-client deterministic stream for a given (round, local step). """
        return seeding.stream(self.seed, seeding.CLIENT, self.client_id, round_index, step)

    def local_logits(self, x: np.ndarray) -> np.ndarray:
        z = forward_prefix(self.prefix, x, self.split_depth, activation=self.template.activation)
        return apply_head(self.head, z)

    def features(self, x: np.ndarray, depth: Optional[int] = None) -> np.ndarray:
        depth = self.split_depth if depth is None else depth
        return forward_prefix(self.prefix, x, depth, activation=self.template.activation)

    def __repr__(self):
        return "ClientState(id={}, split_depth={}, e={:.3f}, {})".format(
            self.client_id, self.split_depth, self.entropy_threshold, self.shard)


class ViewTape(NamedTuple):
    """ Everything the outer update needs from branch double-dagger. """
    tape: GradTape
    z_ddagger: Node
    loss_c: Node
    adapted: List  # adapted (prefix + head) of branch double-dagger, same order as ClientState.params
    source: List  # pre-adaptation params, same order


class ViewPair(NamedTuple):
    z_dagger: np.ndarray  # branch dagger (adapted on B1) evaluated on x2, at depth K
    z_ddagger: np.ndarray  # branch double-dagger (adapted on B2) evaluated on x1, at the split depth
    exit_depth: int
    indicator: Indicator
    view_tape: ViewTape
    dagger_indices: np.ndarray  # dataset rows used to compute z_dagger (x2)
    ddagger_indices: np.ndarray  # rows used to compute z_ddagger (x1)

    @property
    def loss_c(self) -> float:
        return float(self.view_tape.loss_c.value)


def _exit_loss(prefix, head, batch: Batch, activation: str, tape: GradTape):
    z = forward_prefix(prefix, batch.x, len(prefix), tape, activation)
    return z, tape.cross_entropy(apply_head(head, z, tape), batch.y)


def adapt(params: Tuple[Sequence[ParamBlock], ExitHead], batch: Batch, cfg: AdaptConfig,
          activation='relu') -> Tuple[List[ParamBlock], ExitHead]:
    """ S SGD steps (step alpha) on the exit-head cross-entropy over one batch. Returns new layers. """
    if len(batch) == 0:
        raise ValueError("Cannot adapt on an empty batch")
    prefix, head = list(params[0]), params[1]
    layers = copy_layers(prefix + [head])
    for _ in range(cfg.inner_steps):
        tape = GradTape()
        _, loss = _exit_loss(layers[:-1], layers[-1], batch, activation, tape)
        layers = sgd_step(layers, select_grads(layers, backward(tape, loss)), cfg.inner_lr)
    return layers[:-1], layers[-1]


def sample_exit_depth(state: ClientState, rng: np.random.Generator) -> int:
    """ Uniform over the exit depths the client owns (exit_set capped at its split depth). """
    candidates = [k for k in state.template.exit_set if k <= state.split_depth]
    if len(candidates) == 0:
        raise DepthError("Client {}: no exit depth <= split depth {}".format(state.client_id, state.split_depth))
    return candidates[int(rng.integers(len(candidates)))]


def make_views(state: ClientState, b1: Batch, b2: Batch, exit_depth: int, cfg: AdaptConfig) -> ViewPair:
    """
    Branch dagger is adapted on B1 then evaluated on x2 up to depth K; branch double-dagger is adapted on B2
    then evaluated on x1 up to the split depth, on a tape kept for the outer update
    (with the exit loss l_C = CE(h(z), y1) recorded on the same tape).
    """
    if len(b1) != len(b2):
        raise ShapeError("Paired batches must have equal sizes ({} and {})".format(len(b1), len(b2)))
    if exit_depth not in state.template.exit_set or exit_depth > state.split_depth:
        raise DepthError("Exit depth {} is not a valid exit for client {} (exits {}, split depth {})"
                         .format(exit_depth, state.client_id, state.template.exit_set, state.split_depth))
    activation = state.template.activation
    prefix_dagger, _ = adapt((state.prefix, state.head), b1, cfg, activation)
    prefix_ddagger, head_ddagger = adapt((state.prefix, state.head), b2, cfg, activation)
    z_dagger = forward_prefix(prefix_dagger, b2.x, exit_depth, activation=activation)
    tape = GradTape()
    z_ddagger, loss_c = _exit_loss(prefix_ddagger, head_ddagger, b1, activation, tape)
    view_tape = ViewTape(tape, z_ddagger, loss_c, prefix_ddagger + [head_ddagger], state.params)
    return ViewPair(z_dagger, z_ddagger.value, exit_depth, Indicator.from_label_pairs(b1.y, b2.y), view_tape,
                    b2.indices, b1.indices)


def make_view_payloads(view: ViewPair, split_depth: int, bits: int,
                       rng: np.random.Generator) -> Tuple[FeaturePair, TaskFeature]:
    """ Quantized client-to-server messages carrying the two views. """
    feature_pair = FeaturePair(quantize(view.z_dagger, bits, rng), view.exit_depth, view.indicator)
    return feature_pair, TaskFeature(quantize(view.z_ddagger, bits, rng), split_depth)


def outer_update(state: ClientState, view_tape: Optional[ViewTape], cut_grad: np.ndarray, outer_lr: float,
                 gamma: float) -> ClientState:
    """
    First-order meta update: gradients of gamma.l_C + (1-gamma).l_S w.r.t. the adapted double-dagger params,
    applied with step beta to the pre-adaptation params. The l_S part enters through cut_grad, the gradient
    at the cut returned by the server (already weighted by 1-gamma).
    """
    if view_tape is None:
        raise TapeError("Client {}: the outer update requires the tape of the views".format(state.client_id))
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1] (got {})".format(gamma))
    if outer_lr < 0.0:
        raise ValueError("outer_lr must be >= 0 (got {})".format(outer_lr))
    if len(view_tape.source) != len(state.params) \
            or any(a is not b for a, b in zip(view_tape.source, state.params)):
        raise TapeError("Client {}: the views were computed from other parameters".format(state.client_id))
    tape = view_tape.tape
    loss = tape.scale(view_tape.loss_c, gamma)
    grads = tape.backward(loss=loss, seeds=[(view_tape.z_ddagger, cut_grad)]).layers
    grads = select_grads(view_tape.adapted, grads)
    # First-order approximation: gradients at adapted params are applied to the pre-adaptation params
    source_grads = {p: grads[a] for p, a in zip(state.params, view_tape.adapted)}
    updated = sgd_step(state.params, source_grads, outer_lr)
    return state.with_params(updated[:-1], updated[-1])


def infer(state: ClientState, server_handle, x: np.ndarray, bits: int,
          rng: Optional[np.random.Generator] = None) -> Tuple[int, str]:
    """
    Entropy-gated inference of a single sample: local exit if the entropy of the local softmax is strictly below
    e_n, otherwise the quantized features are offloaded to the server.

    :returns: (predicted class, 'local' or 'offload')
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("infer expects a single sample (got shape {})".format(x.shape))
    z = state.features(x[None, :])
    logits = apply_head(state.head, z)[0]
    if functional.softmax_entropy(logits) < state.entropy_threshold:
        return int(functional.predict(logits)[0]), 'local'
    if server_handle is None:
        raise ServerUnreachableError("Client {}: no server to offload to".format(state.client_id))
    rng = rng if rng is not None else state.rng_stream(0, 0)
    server_logits = server_handle.infer(InferenceFeature(quantize(z, bits, rng), state.split_depth),
                                        state.client_id)
    return int(functional.predict(server_logits)[0]), 'offload'


def personalize(state: ClientState, global_params: Tuple[Sequence[ParamBlock], ExitHead], dataset: Dataset,
                cfg: AdaptConfig, personalize_steps: int, rng: np.random.Generator,
                shard: Optional[Shard] = None) -> ClientState:
    """ (phi_n, h_n) <- Adapt((phi, h); D_n): personalize_steps SGD steps on mini-batches which cycle through
    the client's full (training) shard. """
    shard = state.shard if shard is None else shard
    if len(shard) == 0:
        raise ValueError("Client {}: cannot personalize on an empty shard".format(state.client_id))
    step_cfg = AdaptConfig(cfg.inner_lr, 1, cfg.batch_size)
    prefix, head = copy_layers(global_params[0]), global_params[1].copy()
    done = 0
    while done < personalize_steps:
        for batch_indices in iterate_minibatches(shard.indices, cfg.batch_size, rng):
            if done >= personalize_steps:
                break
            prefix, head = adapt((prefix, head), Batch.from_dataset(dataset, batch_indices), step_cfg,
                                 state.template.activation)
            done += 1
    return state.with_params(prefix, head)
