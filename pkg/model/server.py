"""
Main server: back end theta = trunk (blocks d_min+1..D) + final head.
Depth-matched trunk execution, contrastive alignment (CSA) of the trunk, U-shaped task training.
"""

from typing import List, NamedTuple, Optional, Sequence, Dict, Tuple

import numpy as np

from model.autograd import GradTape, Node, contrastive_terms
from model.backbone import BackboneTemplate, ParamBlock, ExitHead, forward_blocks, apply_head
from model.base import sgd_step, select_grads
from model.quantization import dequantize
from protocol.channel import Channel
from protocol.ledger import TrafficLedger
from protocol.messages import InferenceFeature, InferenceLogits, DenseTensor, Indicator
from utils.exception import DepthError, ShapeError, TapeError


class ServerState:
    def __init__(self, template: BackboneTemplate, trunk: Sequence[ParamBlock], head: ExitHead,
                 margin=1.0, csa_weight=1.0, csa_lr=0.05):
        self.template = template
        self.trunk, self.head = list(trunk), head
        self.margin = float(margin)  # m
        self.csa_weight = float(csa_weight)  # multiplier of the CSA loss (0 disables CSA updates)
        self.csa_lr = float(csa_lr)
        expected_depths = list(range(template.min_split + 1, template.depths + 1))
        if [b.depth_index for b in self.trunk] != expected_depths:
            raise DepthError("The trunk must cover depths {}..{} contiguously (got {})".format(
                expected_depths[0], expected_depths[-1], [b.depth_index for b in self.trunk]))
        if head.depth_index != template.depths or head.in_dim != template.feature_dim(template.depths):
            raise ShapeError("The server head must attach after block {}".format(template.depths))
        if self.margin <= 0.0:
            raise ValueError("margin must be > 0 (got {})".format(margin))
        if self.csa_weight < 0.0 or self.csa_lr < 0.0:
            raise ValueError("csa_weight and csa_lr must be >= 0")

    @property
    def params(self) -> List:
        """ trunk then head """
        return self.trunk + [self.head]

    def with_params(self, trunk: Sequence[ParamBlock], head: ExitHead) -> 'ServerState':
        return ServerState(self.template, trunk, head, self.margin, self.csa_weight, self.csa_lr)

    def copy(self) -> 'ServerState':
        return self.with_params([b.copy() for b in self.trunk], self.head.copy())

    def suffix(self, exit_depth: int) -> List[ParamBlock]:
        """ Trunk blocks strictly deeper than exit_depth. """
        return [b for b in self.trunk if b.depth_index > exit_depth]

    def __repr__(self):
        return "ServerState(trunk depths {}..{}, m={}, csa_weight={})".format(
            self.trunk[0].depth_index, self.trunk[-1].depth_index, self.margin, self.csa_weight)


class TaskContext(NamedTuple):
    """ Kept by the server between the U-shaped forward pass and the upstream gradient. """
    tape: GradTape
    z: Node
    u: Node
    server: ServerState


def duplicate(theta: ServerState, participants: Sequence[int]) -> Dict[int, ServerState]:
    """ theta^{r,0}_n: independent deep copies, one per participant. """
    return {n: theta.copy() for n in participants}


def _check_features(theta: ServerState, z: np.ndarray, exit_depth: int):
    if exit_depth not in theta.template.exit_set:
        raise DepthError("Depth {} is not an exit depth {}".format(exit_depth, theta.template.exit_set))
    expected = theta.template.feature_dim(exit_depth)
    if np.ndim(z) != 2 or z.shape[1] != expected:
        raise ShapeError("Features offloaded at depth K={} must have dim {} (got shape {})"
                         .format(exit_depth, expected, np.shape(z)))


def depth_matched_forward(theta: ServerState, z, exit_depth: int, tape: Optional[GradTape] = None):
    """ Runs the trunk blocks deeper than exit_depth (stops before the head). """
    _check_features(theta, z.value if isinstance(z, Node) else np.asarray(z), exit_depth)
    return forward_blocks(theta.suffix(exit_depth), z, tape, theta.template.activation)


def csa_loss(z_s_dagger: np.ndarray, z_s_ddagger: np.ndarray, indicator, margin: float) -> float:
    """ Mean over pairs of I.0.5.d^2 + (1-I).0.5.max(0, m-d)^2, with d the euclidean distance of a pair. """
    bits = indicator.bits if isinstance(indicator, Indicator) else indicator
    return float(contrastive_terms(z_s_dagger, z_s_ddagger, bits, margin)[0])


def csa_update(theta: ServerState, z_dagger: np.ndarray, exit_depth: int, z_ddagger: np.ndarray, split_depth: int,
               indicator: Optional[Indicator]) -> Tuple[ServerState, float]:
    """
    One CSA step on the trunk only. Gradients are stopped at the (dequantized) client features, and the head is
    never involved. Returns the new state (sharing the same head object) and the CSA loss before the update.
    """
    if indicator is None:
        raise ValueError("CSA requires the pairwise indicator")
    tape = GradTape()
    z_a = tape.stop_gradient(tape.constant(z_dagger))
    z_b = tape.stop_gradient(tape.constant(z_ddagger))
    z_s_a = depth_matched_forward(theta, z_a, exit_depth, tape)
    z_s_b = depth_matched_forward(theta, z_b, split_depth, tape)
    loss = tape.contrastive_alignment(z_s_a, z_s_b, indicator.bits, theta.margin)
    loss_value = float(loss.value)
    if theta.csa_weight == 0.0:
        return theta, loss_value
    grads = tape.backward(loss=tape.scale(loss, theta.csa_weight)).layers
    new_trunk = sgd_step(theta.trunk, select_grads(theta.trunk, grads), theta.csa_lr)
    return theta.with_params(new_trunk, theta.head), loss_value


def u_shaped_task_forward(theta: ServerState, z_ddagger: np.ndarray, split_depth: int) -> Tuple[np.ndarray, TaskContext]:
    """ u = head(trunk_{split_depth+1..D}(z)). The logits are returned to the client, the tape is kept. """
    tape = GradTape()
    z = tape.watch(z_ddagger)
    u = apply_head(theta.head, depth_matched_forward(theta, z, split_depth, tape), tape)
    return u.value, TaskContext(tape, z, u, theta)


def apply_upstream_grad(theta: ServerState, ctx: Optional[TaskContext], g_u: np.ndarray, outer_lr: float,
                        gamma: float) -> Tuple[ServerState, np.ndarray]:
    """
    Back-propagates (1-gamma).g_u through head and trunk, applies an SGD step of size outer_lr,
    and returns the gradient at the cut g_z (for the client's outer update).
    """
    if ctx is None:
        raise TapeError("No task forward pass to back-propagate through")
    if ctx.server is not theta or ctx.tape.consumed:
        raise TapeError("Stale task tape: it was recorded for other server parameters, or already used")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1] (got {})".format(gamma))
    g_u = np.asarray(g_u, dtype=np.float64)
    result = ctx.tape.backward(seeds=[(ctx.u, (1.0 - gamma) * g_u)], wrt=[ctx.z])
    updated = sgd_step(theta.params, select_grads(theta.params, result.layers), outer_lr)
    return theta.with_params(updated[:-1], updated[-1]), result.inputs[0]


def server_logits(theta: ServerState, z: np.ndarray, exit_depth: int) -> np.ndarray:
    return apply_head(theta.head, depth_matched_forward(theta, z, exit_depth))


class ServerHandle:
    def __init__(self, theta: ServerState, ledger: Optional[TrafficLedger] = None, round_index=0,
                 record_transcript=False):
        """ Access to the main server for inference offloading, through encoded channels. """
        self.theta = theta
        self.ledger = ledger if ledger is not None else TrafficLedger()
        self.round_index = round_index
        self.record_transcript = record_transcript
        self.frames: List[bytes] = list()

    def infer(self, request: InferenceFeature, client_id: int) -> np.ndarray:
        channel = Channel(client_id, self.round_index, self.ledger, self.record_transcript)
        received = channel.send(request)
        logits = server_logits(self.theta, dequantize(received.feature), received.split_depth)
        answer = channel.send(InferenceLogits(DenseTensor(logits)))
        self.frames += channel.frames
        return answer.logits.data
