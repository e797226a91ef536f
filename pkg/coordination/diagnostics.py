"""
Convergence diagnostics: global objective F(v) = sum_n p_n (F_n + J_n), squared norm of its gradient
w.r.t. the concatenated parameters v = ({phi_n, h_n}, theta), and empirical probes of the assumptions
used by the stationary-point convergence analysis (smoothness L, dissimilarity B, noise variances, G).

Probes are deterministic: full training shards, features offloaded at each client's split depth,
no quantization and no exit-depth sampling.
"""

from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

import config
from model import functional
from model.autograd import GradTape, LayerGrad
from model.backbone import forward_prefix, apply_head
from model.base import flatten_layers, flatten_grads, assign_flat
from model.client import ClientState
from model.quantization import quantize, dequantize
from model.server import ServerState, depth_matched_forward
from utils import seeding


class ClientGradient(NamedTuple):
    task_loss: float  # F_n = gamma.l_C + (1-gamma).l_S
    csa_loss: float  # J_n (already multiplied by csa_weight)
    client_grad: np.ndarray  # dF_n / d(phi_n, h_n), unweighted
    theta_grad: np.ndarray  # d(F_n + J_n) / d theta, unweighted


class GlobalGradient(NamedTuple):
    objective: float
    weights: np.ndarray  # p_n
    per_client: List[ClientGradient]

    @property
    def theta_grad(self) -> np.ndarray:
        return sum(p * g.theta_grad for p, g in zip(self.weights, self.per_client))

    def vector(self) -> np.ndarray:
        """ Gradient w.r.t. v, in the order of flatten_state(...). """
        parts = [p * g.client_grad for p, g in zip(self.weights, self.per_client)]
        return np.concatenate(parts + [self.theta_grad])

    @property
    def norm_sq(self) -> float:
        client_part = sum(float(np.sum((p * g.client_grad) ** 2)) for p, g in zip(self.weights, self.per_client))
        return client_part + float(np.sum(self.theta_grad ** 2))


def reporting_weights(clients: Sequence[ClientState], p: Optional[Sequence[float]] = None) -> np.ndarray:
    """ p_n: data-proportional weights zeta_n, normalized to sum to 1. """
    p = np.asarray([c.shard.weight for c in clients] if p is None else p, dtype=np.float64)
    if np.any(p < 0.0) or not p.sum() > 0.0:
        raise ValueError("Reporting weights must be >= 0 with a positive sum (got {})".format(p))
    return p / p.sum()


def _grads_for(params, grads: Dict) -> Dict:
    """ Gradients of params, zero for params which were not reached by the forward pass. """
    return {p: grads.get(p, LayerGrad(np.zeros_like(p.weights), np.zeros_like(p.bias))) for p in params}


def probe_pairing(n_samples: int, seed: int, client_id: int) -> np.ndarray:
    """ Fixed pairing of a client's samples (i, perm[i]) used for the CSA term of the objective. """
    return seeding.stream(seed, seeding.PROBE, client_id).permutation(n_samples)


def task_gradient(client: ClientState, theta: ServerState, x: np.ndarray, y: np.ndarray, gamma: float):
    """ F_n = gamma.l_C + (1-gamma).l_S on (x, y) with features at the split depth, and its gradients.

    :returns: (F_n, l_C, l_S, client gradient vector, theta gradient vector)
    """
    tape = GradTape()
    z = forward_prefix(client.prefix, x, client.split_depth, tape, client.template.activation)
    loss_c = tape.cross_entropy(apply_head(client.head, z, tape), y)
    loss_s = tape.cross_entropy(apply_head(theta.head, depth_matched_forward(theta, z, client.split_depth, tape),
                                           tape), y)
    loss = tape.add(tape.scale(loss_c, gamma), tape.scale(loss_s, 1.0 - gamma))
    grads = tape.backward(loss=loss).layers
    return (float(loss.value), float(loss_c.value), float(loss_s.value),
            flatten_grads(client.params, _grads_for(client.params, grads)),
            flatten_grads(theta.params, _grads_for(theta.params, grads)))


def csa_gradient(theta: ServerState, z: np.ndarray, y: np.ndarray, split_depth: int, pairing: np.ndarray):
    """ J = csa_weight.CSA(theta) on pairs (z_i, z_pairing[i]), gradients stopped at the features. """
    if theta.csa_weight == 0.0:
        return 0.0, np.zeros((sum(p.num_params for p in theta.params), ))
    tape = GradTape()
    z_a = tape.stop_gradient(tape.constant(z))
    z_b = tape.stop_gradient(tape.constant(z[pairing]))
    indicator = (y == y[pairing]).astype(np.float64)
    loss = tape.contrastive_alignment(depth_matched_forward(theta, z_a, split_depth, tape),
                                      depth_matched_forward(theta, z_b, split_depth, tape), indicator, theta.margin)
    loss = tape.scale(loss, theta.csa_weight)
    grads = tape.backward(loss=loss).layers
    return float(loss.value), flatten_grads(theta.params, _grads_for(theta.params, grads))


def client_gradient(client: ClientState, theta: ServerState, dataset, gamma: float, seed: int) -> ClientGradient:
    x, y = dataset.features[client.shard.indices], dataset.labels[client.shard.indices]
    task_loss, _, _, client_grad, theta_task_grad = task_gradient(client, theta, x, y, gamma)
    z = client.features(x)
    csa_value, theta_csa_grad = csa_gradient(theta, z, y, client.split_depth,
                                             probe_pairing(len(y), seed, client.client_id))
    return ClientGradient(task_loss, csa_value, client_grad, theta_task_grad + theta_csa_grad)


def global_gradient(clients: Sequence[ClientState], theta: ServerState, dataset, gamma: float, seed: int,
                    p: Optional[Sequence[float]] = None) -> GlobalGradient:
    weights = reporting_weights(clients, p)
    per_client = [client_gradient(c, theta, dataset, gamma, seed) for c in clients]
    objective = float(sum(w * (g.task_loss + g.csa_loss) for w, g in zip(weights, per_client)))
    return GlobalGradient(objective, weights, per_client)


def global_objective(state, run_config: config.RunConfig) -> float:
    return global_gradient(state.clients, state.server, state.dataset, run_config.train.gamma,
                           run_config.train.seed).objective


def estimate_global_grad_norm(state, run_config: config.RunConfig, p: Optional[Sequence[float]] = None) -> float:
    """ ||grad F(v)||^2 over the concatenated parameters of all clients and theta. """
    return global_gradient(state.clients, state.server, state.dataset, run_config.train.gamma,
                           run_config.train.seed, p).norm_sq


def local_exit_rate(clients: Sequence[ClientState], dataset) -> float:
    """ Fraction of the training samples (all clients pooled) that exit locally under entropy gating. """
    n_local, n_total = 0, 0
    for c in clients:
        x = dataset.features[c.shard.indices]
        entropies = functional.softmax_entropies(c.local_logits(x))
        n_local += int(np.sum(entropies < c.entropy_threshold))
        n_total += x.shape[0]
    return n_local / n_total if n_total > 0 else 0.0


def round_probe(state, run_config: config.RunConfig):
    """ (objective, grad_norm_sq, local_exit_rate) at the current parameters. """
    g = global_gradient(state.clients, state.server, state.dataset, run_config.train.gamma, run_config.train.seed)
    return g.objective, g.norm_sq, local_exit_rate(state.clients, state.dataset)


def mean_local_steps(clients: Sequence[ClientState], local_steps: Sequence[int]) -> float:
    """ T_bar = sum_n p_n T_n """
    weights = reporting_weights(clients)
    return float(sum(w * local_steps[c.client_id] for w, c in zip(weights, clients)))


def rate_reference(initial_objective: float, outer_lr: float, rounds: int, mean_steps: float) -> float:
    """ 4 (F(v^0) - F_inf) / (beta R T_bar), with F_inf = 0 since all losses are non-negative. """
    if outer_lr <= 0.0 or rounds <= 0 or mean_steps <= 0.0:
        return float('inf')
    return 4.0 * initial_objective / (outer_lr * rounds * mean_steps)


# ============================================ Parameter vectors ============================================

def flatten_state(clients: Sequence[ClientState], theta: ServerState) -> np.ndarray:
    return np.concatenate([flatten_layers(c.params) for c in clients] + [flatten_layers(theta.params)])


def unflatten_state(clients: Sequence[ClientState], theta: ServerState, vector: np.ndarray):
    """ Inverse of flatten_state: new client states and server state holding the values of the vector. """
    new_clients, offset = list(), 0
    for c in clients:
        size = sum(p.num_params for p in c.params)
        layers = assign_flat(c.params, vector[offset:offset + size])
        new_clients.append(c.with_params(layers[:-1], layers[-1]))
        offset += size
    layers = assign_flat(theta.params, vector[offset:])
    return new_clients, theta.with_params(layers[:-1], layers[-1])


# ============================================ Assumption probes ============================================

class AssumptionReport:
    def __init__(self):
        self.smoothness = float('nan')  # L
        self.dissimilarity = float('nan')  # B
        self.sigma_c_sq = float('nan')
        self.sigma_s_sq = float('nan')
        self.sigma_q_sq = float('nan')
        self.sigma_q_sq_bound = float('nan')
        self.sigma_csa_sq = float('nan')
        self.inner_grad_bound = float('nan')  # G

    def as_dict(self) -> Dict[str, float]:
        return {'L': self.smoothness, 'B': self.dissimilarity, 'sigma_c_sq': self.sigma_c_sq,
                'sigma_s_sq': self.sigma_s_sq, 'sigma_q_sq': self.sigma_q_sq,
                'sigma_q_sq_bound': self.sigma_q_sq_bound, 'sigma_csa_sq': self.sigma_csa_sq,
                'G': self.inner_grad_bound}


def estimate_smoothness(clients, theta, dataset, gamma: float, seed: int, pairs: int, radius: float) -> float:
    """ Empirical L: max ||grad F(x) - grad F(y)|| / ||x - y|| over random points x, y around v. """
    v = flatten_state(clients, theta)
    scale = radius * max(float(np.linalg.norm(v)), 1.0)
    rng = seeding.stream(seed, seeding.PROBE, 0, 1)
    L = 0.0
    for _ in range(pairs):
        points = list()
        for _ in range(2):
            u = rng.standard_normal(v.shape)
            points.append(v + scale * u / np.linalg.norm(u))
        grads = [global_gradient(*unflatten_state(clients, theta, pt), dataset, gamma, seed).vector()
                 for pt in points]
        distance = float(np.linalg.norm(points[0] - points[1]))
        if distance > 0.0:
            L = max(L, float(np.linalg.norm(grads[0] - grads[1])) / distance)
    return L


def estimate_dissimilarity(g: GlobalGradient) -> float:
    """ Smallest B >= 1 such that sum_n p_n ||grad F_n||^2 <= B^2 ||grad F||^2 at the current v. """
    spread = sum(p * (float(np.sum(c.client_grad ** 2)) + float(np.sum(c.theta_grad ** 2)))
                 for p, c in zip(g.weights, g.per_client))
    norm_sq = g.norm_sq
    if norm_sq == 0.0:
        return 1.0 if spread == 0.0 else float('inf')
    return max(1.0, float(np.sqrt(spread / norm_sq)))


def estimate_noise(clients, theta, dataset, hp: config.HyperParams, probes: int, report: AssumptionReport):
    """ Mini-batch gradient noise of l_C and l_S, quantization noise, CSA pair-sampling noise and
    the inner-gradient second-moment bound G. Results are p_n-weighted over clients. """
    weights = reporting_weights(clients)
    sigma_c, sigma_s, sigma_q, sigma_q_bound, sigma_csa, G = 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    for w, c in zip(weights, clients):
        rng = seeding.stream(hp.seed, seeding.PROBE, c.client_id, 2)
        x, y = dataset.features[c.shard.indices], dataset.labels[c.shard.indices]
        _, _, _, full_c, _ = task_gradient(c, theta, x, y, 1.0)
        _, _, _, full_s_client, full_s_theta = task_gradient(c, theta, x, y, 0.0)
        full_s = np.concatenate([full_s_client, full_s_theta])
        z = c.features(x)
        csa_grads = list()
        for _ in range(probes):
            idx = rng.choice(len(y), size=min(hp.batch_size, len(y)), replace=False)
            _, _, _, mb_c, _ = task_gradient(c, theta, x[idx], y[idx], 1.0)
            _, _, _, mb_s_client, mb_s_theta = task_gradient(c, theta, x[idx], y[idx], 0.0)
            sigma_c += w * float(np.sum((mb_c - full_c) ** 2)) / probes
            sigma_s += w * float(np.sum((np.concatenate([mb_s_client, mb_s_theta]) - full_s) ** 2)) / probes
            G = max(G, float(np.sum(mb_c ** 2)))
            q = quantize(z, hp.bits, rng)
            sigma_q += w * float(np.mean((dequantize(q) - z) ** 2)) / probes
            sigma_q_bound = max(sigma_q_bound, q.step ** 2 / 4.0)
            csa_grads.append(csa_gradient(theta, z, y, c.split_depth, rng.permutation(len(y)))[1])
        if probes > 0:
            csa_grads = np.stack(csa_grads)
            sigma_csa += w * float(np.mean(np.sum((csa_grads - csa_grads.mean(axis=0)) ** 2, axis=1)))
    report.sigma_c_sq, report.sigma_s_sq = sigma_c, sigma_s
    report.sigma_q_sq, report.sigma_q_sq_bound = sigma_q, sigma_q_bound
    report.sigma_csa_sq, report.inner_grad_bound = sigma_csa, G


def probe_assumptions(state, run_config: config.RunConfig) -> AssumptionReport:
    """ Runs the probes enabled in run_config.diagnostics at the current parameters, and warns if the step sizes
    are larger than the caps implied by the estimates. """
    diag, hp = run_config.diagnostics, run_config.train
    report = AssumptionReport()
    g = global_gradient(state.clients, state.server, state.dataset, hp.gamma, hp.seed)
    if diag.B_probe:
        report.dissimilarity = estimate_dissimilarity(g)
    if diag.estimate_smoothness and diag.L_probe_pairs > 0:
        report.smoothness = estimate_smoothness(state.clients, state.server, state.dataset, hp.gamma, hp.seed,
                                                diag.L_probe_pairs, diag.probe_radius)
    if diag.noise_probes > 0:
        estimate_noise(state.clients, state.server, state.dataset, hp, diag.noise_probes, report)
    B = report.dissimilarity if np.isfinite(report.dissimilarity) else 0.0
    config.check_step_sizes(hp, report.smoothness, B)
    if run_config.verbosity >= 1:
        print("[coordination/diagnostics.py] " + ", ".join("{}={:.4g}".format(k, v)
                                                           for k, v in report.as_dict().items()))
    return report
