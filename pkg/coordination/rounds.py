"""
Fed server and round orchestrator: simulation state initialization, participant selection,
client-pair local steps (in parallel tasks), depth-aware aggregation of client models and FedAvg of theta.
"""

import concurrent.futures
import math
import time
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import config
from data.sampler import split_holdout, sample_batch
from data.synthdata import Dataset, Shard, gen_gaussian_mixture, dirichlet_partition
from logs.metrics import RoundMetric, RoundMetrics
from model.autograd import GradTape
from model.backbone import BackboneTemplate, AffineLayer, init_blocks, init_head_bank
from model.client import (ClientState, Batch, AdaptConfig, make_views, make_view_payloads, outer_update,
                          sample_exit_depth)
from model.quantization import dequantize
from model.server import ServerState, duplicate, csa_update, u_shaped_task_forward, apply_upstream_grad
from protocol.channel import Channel
from protocol.ledger import TrafficLedger
from protocol.messages import TaskLogits, UpstreamGrad, CutGrad, ModelUpload, ModelDownload, DenseTensor
from utils import seeding
from utils.exception import StructuralError, RoundError, ModelConvergenceError, check_nan_values


class SimulationState:
    def __init__(self, template: BackboneTemplate, dataset: Dataset, clients: Sequence[ClientState],
                 server: ServerState, holdout: Mapping[int, np.ndarray]):
        """ Everything the simulation needs between rounds. Client list index == client id. """
        self.template, self.dataset = template, dataset
        self.clients, self.server = list(clients), server
        self.holdout = dict(holdout)  # client id -> held-out dataset rows
        self.round_index = 0  # next round to run
        self.ledger = TrafficLedger()
        self.transcript: List[bytes] = list()

    def replace(self, clients: Sequence[ClientState], server: ServerState) -> 'SimulationState':
        """ New state sharing dataset, ledger and transcript. """
        new_state = SimulationState(self.template, self.dataset, clients, server, self.holdout)
        new_state.round_index = self.round_index
        new_state.ledger, new_state.transcript = self.ledger, self.transcript
        return new_state


def build_template(run_config: config.RunConfig) -> BackboneTemplate:
    m = run_config.model
    return BackboneTemplate.from_dims(m.dim, m.hidden_dims, m.exit_set, m.classes, m.activation)


def init_simulation(run_config: config.RunConfig, dataset: Optional[Dataset] = None,
                    shards: Optional[Sequence[Shard]] = None) -> SimulationState:
    """
    Synthetic data, non-IID shards and held-out splits, then a single initialization of the full template:
    clients and server copy the blocks of the depths they own (and the head of their exit depth).
    """
    m, t = run_config.model, run_config.train
    seed = t.seed
    if dataset is None:
        dataset = gen_gaussian_mixture(m.classes, m.dim, m.samples, m.spread, seeding.stream(seed, seeding.DATA),
                                       mean_scale=m.mean_scale)
    if shards is None:
        shards = dirichlet_partition(dataset, t.clients, m.concentration, seeding.stream(seed, seeding.PARTITION))
    template = build_template(run_config)
    init_rng = seeding.stream(seed, seeding.INIT)
    blocks = init_blocks(template, range(1, template.depths + 1), init_rng)
    heads = init_head_bank(template, init_rng)
    clients, holdout = list(), dict()
    for n, shard in enumerate(shards):
        train_shard, holdout[n] = split_holdout(shard, m.holdout, seeding.stream(seed, seeding.HOLDOUT, n))
        k = m.split_depths[n]
        clients.append(ClientState(n, template, [b.copy() for b in blocks[:k]], heads[k].copy(), k,
                                   m.entropy_threshold, train_shard, seed))
    server = ServerState(template, [b.copy() for b in blocks[template.min_split:]], heads[template.depths].copy(),
                         t.margin, t.csa_weight, t.csa_lr)
    if run_config.verbosity >= 1:
        print("[coordination] {} clients (split depths {}), shard sizes {}".format(
            len(clients), m.split_depths, [len(c.shard) for c in clients]))
    return SimulationState(template, dataset, clients, server, holdout)


def participant_count(N: int, participation: float) -> int:
    return min(N, max(1, math.ceil(round(participation * N, 9))))


def select_participants(N: int, participation: float, round_index: int, seed: int) -> List[int]:
    """ ceil(rho.N) clients sampled uniformly without replacement, deterministic in (seed, round). Sorted ids. """
    k = participant_count(N, participation)
    if k == N:
        return list(range(N))
    rng = seeding.stream(seed, seeding.SELECTION, 0, round_index)
    return sorted(int(n) for n in rng.choice(N, size=k, replace=False))


# ================================================= Aggregation ===================================================

def _weighted_average(layers: Sequence[AffineLayer], weights: Sequence[float]) -> AffineLayer:
    """ Coordinatewise weighted average (weights already normalized), accumulated in the given order. """
    ref = layers[0]
    for layer in layers[1:]:
        if layer.weights.shape != ref.weights.shape or layer.bias.shape != ref.bias.shape \
                or type(layer) is not type(ref):
            raise StructuralError("Layers at depth {} have different shapes or kinds: {} and {}"
                                  .format(ref.depth_index, ref, layer))
    w_avg, b_avg = np.zeros_like(ref.weights), np.zeros_like(ref.bias)
    for layer, zeta in zip(layers, weights):
        w_avg = w_avg + zeta * layer.weights
        b_avg = b_avg + zeta * layer.bias
    return ref.with_params(w_avg, b_avg)


def _mix(own: AffineLayer, federated: AffineLayer, lambda_: float) -> AffineLayer:
    if lambda_ == 0.0:
        return federated.copy()
    if lambda_ == 1.0:
        return own.copy()
    return own.with_params(lambda_ * own.weights + (1.0 - lambda_) * federated.weights,
                           lambda_ * own.bias + (1.0 - lambda_) * federated.bias)


def aggregate_clients(states: Sequence[ClientState], lambda_: float, zeta: Mapping[int, float],
                      contributors: Optional[Sequence[int]] = None) -> List[ClientState]:
    """
    Depth-aware aggregation: the federated block of depth d averages the blocks of exactly the contributors which
    own depth d (zeta renormalized over them); heads attached at the same depth are averaged together.
    Every client receives lambda.(own block) + (1-lambda).(federated block); a depth that no contributor owns is
    kept as is.

    :param contributors: client ids whose models are averaged (default: all states)
    """
    if not 0.0 <= lambda_ <= 1.0:
        raise ValueError("lambda must be in [0, 1] (got {})".format(lambda_))
    by_id = {s.client_id: s for s in states}
    contributors = sorted(by_id.keys()) if contributors is None else sorted(contributors)
    for s in states:
        depths = [b.depth_index for b in s.prefix]
        if depths != list(range(1, len(depths) + 1)):
            raise StructuralError("Client {} claims depths {} which are not contiguous from 1"
                                  .format(s.client_id, depths))
    blocks: Dict[int, List] = dict()  # depth -> [(zeta, layer)]
    heads: Dict[int, List] = dict()
    for n in contributors:
        s = by_id[n]
        for b in s.prefix:
            blocks.setdefault(b.depth_index, list()).append((zeta[n], b))
        heads.setdefault(s.head.depth_index, list()).append((zeta[n], s.head))

    def federated(groups, depth):
        group = groups[depth]
        total = sum(w for w, _ in group)
        if not total > 0.0:
            raise StructuralError("Contributors at depth {} have a zero total weight".format(depth))
        return _weighted_average([layer for _, layer in group], [w / total for w, _ in group])
    fed_blocks = {d: federated(blocks, d) for d in sorted(blocks)}
    fed_heads = {d: federated(heads, d) for d in sorted(heads)}

    aggregated = list()
    for s in states:
        new_prefix = list()
        for b in s.prefix:
            if b.depth_index not in fed_blocks:
                new_prefix.append(b)
                continue
            if fed_blocks[b.depth_index].weights.shape != b.weights.shape:
                raise StructuralError("Client {}: block at depth {} does not match the federated block shape"
                                      .format(s.client_id, b.depth_index))
            new_prefix.append(_mix(b, fed_blocks[b.depth_index], lambda_))
        head = s.head if s.head.depth_index not in fed_heads else _mix(s.head, fed_heads[s.head.depth_index],
                                                                       lambda_)
        aggregated.append(s.with_params(new_prefix, head))
    return aggregated


def aggregate_server(duplicates: Mapping[int, ServerState], zeta: Mapping[int, float]) -> ServerState:
    """ theta^{r+1} = sum_n zeta_n theta_n (zeta renormalized over the participants). """
    if len(duplicates) == 0:
        raise ValueError("No server duplicate to aggregate")
    ids = sorted(duplicates.keys())
    total = sum(zeta[n] for n in ids)
    weights = [zeta[n] / total for n in ids]
    ref = duplicates[ids[0]]
    n_layers = len(ref.params)
    for n in ids:
        if len(duplicates[n].params) != n_layers:
            raise StructuralError("Server duplicate of client {} has {} layers instead of {}"
                                  .format(n, len(duplicates[n].params), n_layers))
    averaged = [_weighted_average([duplicates[n].params[k] for n in ids], weights) for k in range(n_layers)]
    return ref.with_params(averaged[:-1], averaged[-1])


# ================================================== Local steps ==================================================

class StepLosses(NamedTuple):
    loss_c: float
    loss_s: float
    loss_csa: float


def task_loss_grad(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """ Client side of the U-shaped protocol: l_S = CE(u, y) and its gradient w.r.t. the logits u. """
    tape = GradTape()
    u = tape.watch(logits)
    loss = tape.cross_entropy(u, labels)
    return float(loss.value), tape.backward(loss=loss, wrt=[u]).inputs[0]


def choose_exit_depth(client: ClientState, hp: config.HyperParams, rng: np.random.Generator) -> int:
    if hp.fixed_exit_depth is None:
        return sample_exit_depth(client, rng)
    candidates = [k for k in client.template.exit_set if k <= min(hp.fixed_exit_depth, client.split_depth)]
    return max(candidates)


def local_step(client: ClientState, theta: ServerState, b1: Batch, b2: Batch, exit_depth: int,
               hp: config.HyperParams, channel: Optional[Channel] = None, rng: Optional[np.random.Generator] = None,
               step: int = 0) -> Tuple[ClientState, ServerState, StepLosses]:
    """
    One client-pair local step: views -> (quantized) FeaturePair and TaskFeature -> server CSA update ->
    U-shaped task loss exchange -> server SGD step -> client first-order meta update.
    Without a channel, features are exchanged in-process and unquantized.
    """
    adapt_cfg = AdaptConfig(hp.inner_lr, hp.inner_steps, hp.batch_size)
    view = make_views(client, b1, b2, exit_depth, adapt_cfg)
    if channel is not None:
        feature_pair, task_feature = make_view_payloads(view, client.split_depth, hp.bits, rng)
        feature_pair, task_feature = channel.send(feature_pair, step), channel.send(task_feature, step)
        z_dagger, exit_depth, indicator = dequantize(feature_pair.z_dagger), feature_pair.exit_depth, \
            feature_pair.indicator
        z_ddagger, split_depth = dequantize(task_feature.z_ddagger), task_feature.split_depth
    else:
        z_dagger, indicator = view.z_dagger, view.indicator
        z_ddagger, split_depth = view.z_ddagger, client.split_depth
    # Server: CSA (trunk only, gradients stopped at the features), then U-shaped forward
    theta, loss_csa = csa_update(theta, z_dagger, exit_depth, z_ddagger, split_depth, indicator)
    logits, task_ctx = u_shaped_task_forward(theta, z_ddagger, split_depth)
    if channel is not None:
        logits = channel.send(TaskLogits(DenseTensor(logits)), step).logits.data
    # Client: l_S on the private labels of x1 (z_ddagger was computed on x1)
    loss_s, g_u = task_loss_grad(logits, b1.y)
    if channel is not None:
        g_u = channel.send(UpstreamGrad(DenseTensor(g_u)), step).gradient.data
    theta, g_z = apply_upstream_grad(theta, task_ctx, g_u, hp.outer_lr, hp.gamma)
    if channel is not None:
        g_z = channel.send(CutGrad(DenseTensor(g_z)), step).gradient.data
    client = outer_update(client, view.view_tape, g_z, hp.outer_lr, hp.gamma)
    return client, theta, StepLosses(view.loss_c, loss_s, loss_csa)


class TaskResult(NamedTuple):
    client: ClientState
    theta: ServerState
    losses: List[StepLosses]
    ledger: TrafficLedger
    frames: List[bytes]


def run_client_task(round_index: int, client: ClientState, theta: ServerState, dataset: Dataset,
                    run_config: config.RunConfig) -> TaskResult:
    """ T_n local steps of one (client, server duplicate) pair. Uses only its own random streams. """
    hp = run_config.train
    channel = Channel(client.client_id, round_index, TrafficLedger(), run_config.record_transcript)
    # Fed server -> client: current (phi_n, h_n)
    layers = channel.send(ModelDownload(client.params)).layers
    client = client.with_params(list(layers[:-1]), layers[-1])
    losses = list()
    for t in range(hp.local_steps[client.client_id]):
        rng = client.rng_stream(round_index, t)
        b1 = Batch.from_dataset(dataset, sample_batch(client.shard.indices, hp.batch_size, rng))
        b2 = Batch.from_dataset(dataset, sample_batch(client.shard.indices, hp.batch_size, rng))
        exit_depth = choose_exit_depth(client, hp, rng)
        client, theta, step_losses = local_step(client, theta, b1, b2, exit_depth, hp, channel, rng, t + 1)
        losses.append(step_losses)
        if run_config.verbosity >= 3:
            print("[coordination] round {} client {} step {}: K={} l_C={:.4f} l_S={:.4f} l_CSA={:.4f}".format(
                round_index, client.client_id, t, exit_depth, *step_losses))
    # Client -> fed server: updated (phi_n, h_n)
    layers = channel.send(ModelUpload(client.params), hp.local_steps[client.client_id] + 1).layers
    client = client.with_params(list(layers[:-1]), layers[-1])
    return TaskResult(client, theta, losses, channel.ledger, channel.frames)


def run_round(round_index: int, state: SimulationState, run_config: config.RunConfig,
              executor: Optional[concurrent.futures.Executor] = None,
              probe_fn=None) -> Tuple[SimulationState, RoundMetrics]:
    """
    Selects participants, duplicates theta, runs the client-pair tasks (possibly in parallel), then aggregates
    client models and theta after all tasks are complete (barrier).

    :param probe_fn: optional callable(state) -> (objective, grad_norm_sq, local_exit_rate) evaluated at the
        parameters which start the round
    """
    hp = run_config.train
    t_start = time.perf_counter()
    probe = probe_fn(state) if probe_fn is not None else (0.0, 0.0, 0.0)
    participants = select_participants(len(state.clients), hp.participation, round_index, hp.seed)
    duplicates = duplicate(state.server, participants)
    own_executor = executor is None
    if own_executor:
        executor = concurrent.futures.ThreadPoolExecutor(max_workers=hp.workers)
    try:
        futures = [executor.submit(run_client_task, round_index, state.clients[n], duplicates[n], state.dataset,
                                   run_config) for n in participants]
        results = dict()
        for n, future in zip(participants, futures):  # Barrier: all tasks must complete
            try:
                results[n] = future.result()
            except Exception as e:
                raise RoundError(round_index, n, e) from e
    finally:
        if own_executor:
            executor.shutdown(wait=True)
    # Merged in participant order, independently of the tasks' completion order
    losses = {'c': RoundMetric(), 's': RoundMetric(), 'csa': RoundMetric()}
    for n in participants:
        state.ledger.merge(results[n].ledger)
        state.transcript += results[n].frames
        for step_losses in results[n].losses:
            losses['c'].append(step_losses.loss_c)
            losses['s'].append(step_losses.loss_s)
            losses['csa'].append(step_losses.loss_csa)
        if run_config.verbosity >= 2:
            print("[coordination] round {} client {}: {} steps".format(round_index, n, len(results[n].losses)))
    try:
        updated_clients = [results[c.client_id].client if c.client_id in results else c for c in state.clients]
        zeta = {c.client_id: c.shard.weight for c in state.clients}
        new_clients = aggregate_clients(updated_clients, hp.lambda_, zeta, contributors=participants)
        new_server = aggregate_server({n: results[n].theta for n in participants}, zeta)
        for c in new_clients:
            check_nan_values(round_index, *[a for layer in c.params for a in (layer.weights, layer.bias)])
        check_nan_values(round_index, *[a for layer in new_server.params for a in (layer.weights, layer.bias)])
    except (RoundError, ModelConvergenceError):
        raise
    except Exception as e:
        raise RoundError(round_index, None, e) from e
    new_state = state.replace(new_clients, new_server)
    new_state.round_index = round_index + 1
    wall_ms = (time.perf_counter() - t_start) * 1000.0 if run_config.record_wall_time else 0.0
    metrics = RoundMetrics(round_index, probe[0], probe[1], losses['c'].get(0.0), losses['s'].get(0.0),
                           losses['csa'].get(0.0), state.ledger.total_bytes(round_index, upstream=True),
                           state.ledger.total_bytes(round_index, upstream=False), probe[2], wall_ms)
    return new_state, metrics
