"""
This script performs a single simulation run for the configuration described
in config.py (default values), when running as __main__.

Its run_experiment(...) function can also be called from another script,
with small modifications to the config (enqueued runs, ablations, tests).

See train_queue.py for enqueued runs, and cli.py for the command-line interface.
"""

import concurrent.futures
from typing import Dict, List, NamedTuple

import numpy as np
import pandas as pd

import config
import logs.logger
from coordination import diagnostics
from coordination.rounds import SimulationState, init_simulation, run_round
from data.synthdata import Shard, export_dataset_csv
from evaluation import accuracy
from logs.metrics import RunningMinimum
from model.client import AdaptConfig, ClientState, personalize
from model.server import ServerHandle
from protocol.ledger import TrafficLedger
from utils import seeding


class ExperimentResult(NamedTuple):
    state: SimulationState  # after the last aggregation (before personalization)
    personalized: List[ClientState]
    metrics: pd.DataFrame
    summary: Dict
    clients: pd.DataFrame  # per-client accuracies
    fallback: pd.DataFrame  # (client, depth) fallback accuracies


def personalize_clients(state: SimulationState, run_config: config.RunConfig) -> List[ClientState]:
    """ Final personalization of each client from its (aggregated) model, on its training shard. """
    hp = run_config.train
    cfg = AdaptConfig(hp.inner_lr, 1, hp.batch_size)
    return [personalize(c, (c.prefix, c.head), state.dataset, cfg, hp.personalize_steps,
                        seeding.stream(hp.seed, seeding.PERSONALIZE, c.client_id)) for c in state.clients]


def run_experiment(run_config: config.RunConfig) -> ExperimentResult:
    """ Performs a full simulation run: R rounds, personalization, evaluation, diagnostics and output files.

    The config must have been updated and validated (see config.build_run_config). """
    hp = run_config.train
    logger = logs.logger.RunLogger(run_config)
    logger.write_config()

    # ========== Data, partition and initial models ==========
    state = init_simulation(run_config)
    if run_config.export_dataset:
        shards = [Shard(c.client_id, np.concatenate([c.shard.indices, state.holdout[c.client_id]]), c.shard.weight)
                  for c in state.clients]
        logger.write_file(logs.logger.DATASET_FILE, lambda p: export_dataset_csv(state.dataset, shards, p))

    # ========== Rounds ==========
    def probe_fn(s):
        return diagnostics.round_probe(s, run_config)
    grad_norm_min = RunningMinimum()
    with concurrent.futures.ThreadPoolExecutor(max_workers=hp.workers) as executor:
        for r in range(hp.rounds):
            logger.on_round_starts(r)
            state, metrics = run_round(r, state, run_config, executor, probe_fn)
            grad_norm_min.append(metrics.grad_norm_sq)
            logger.on_round_finished(metrics)
    final_objective, final_grad_norm_sq, final_exit_rate = probe_fn(state)
    metrics_df = logger.metrics_dataframe

    # ========== Personalization and evaluation on held-out data ==========
    personalized = personalize_clients(state, run_config)
    before = [accuracy.local_accuracy(c, state.dataset.features[state.holdout[c.client_id]],
                                      state.dataset.labels[state.holdout[c.client_id]])[0] for c in state.clients]
    handle = ServerHandle(state.server, TrafficLedger(), hp.rounds, run_config.record_transcript)
    clients_df, fallback_df = accuracy.evaluate_clients(personalized, handle, state.dataset, state.holdout, hp.bits,
                                                        seeding.stream(hp.seed, seeding.PROBE, 0, 3))
    clients_df.insert(3, 'local_acc_before', before)
    state.ledger.merge(handle.ledger)
    state.transcript += handle.frames

    # ========== Summary ==========
    mean_steps = diagnostics.mean_local_steps(state.clients, hp.local_steps)
    initial_objective = float(metrics_df['objective'].iloc[0])
    summary = {
        'rounds': hp.rounds, 'clients': len(state.clients), 'seed': hp.seed,
        'objective_initial': initial_objective, 'objective_final': final_objective,
        'grad_norm_sq_initial': float(metrics_df['grad_norm_sq'].iloc[0]),
        'grad_norm_sq_final': final_grad_norm_sq,
        'grad_norm_sq_min': min(grad_norm_min.value, final_grad_norm_sq),
        'local_exit_rate_final': final_exit_rate,
        'mean_local_steps': mean_steps,
        'rate_reference': diagnostics.rate_reference(initial_objective, hp.outer_lr, hp.rounds, mean_steps),
        'bytes_up': state.ledger.total_bytes(upstream=True),
        'bytes_down': state.ledger.total_bytes(upstream=False),
        'local_acc_before_mean': accuracy.mean_accuracy(clients_df, 'local_acc_before'),
        'local_acc_after_mean': accuracy.mean_accuracy(clients_df, 'local_acc'),
        'hybrid_acc_mean': accuracy.mean_accuracy(clients_df, 'hybrid_acc'),
    }
    for depth, acc in accuracy.fallback_by_depth(fallback_df).items():
        summary['fallback_acc_depth{}'.format(depth)] = acc
    unseen = accuracy.unseen_depths(state.template.exit_set, [c.split_depth for c in state.clients])
    summary['unseen_depths'] = ','.join(str(k) for k in unseen) if len(unseen) > 0 else 'none'
    for _, row in clients_df.iterrows():
        prefix = 'client{}.'.format(int(row['client']))
        summary[prefix + 'split_depth'] = int(row['split_depth'])
        summary[prefix + 'local_acc_before'] = float(row['local_acc_before'])
        summary[prefix + 'local_acc_after'] = float(row['local_acc'])
        summary[prefix + 'hybrid_acc'] = float(row['hybrid_acc'])
        summary[prefix + 'hybrid_exit_rate'] = float(row['hybrid_exit_rate'])
    if run_config.diagnostics.enabled:
        report = diagnostics.probe_assumptions(state, run_config)
        for k, v in report.as_dict().items():
            summary['diagnostics.' + k] = v

    # ========== Output files ==========
    logger.write_summary(summary)
    logger.save_checkpoint(personalized, state.server)
    if run_config.record_transcript:
        logger.write_transcript(state.transcript)
    logger.on_training_finished()
    return ExperimentResult(state, personalized, metrics_df, summary, clients_df, fallback_df)


if __name__ == "__main__":
    # Normal run, current values from config.py will be used
    _run_config = config.RunConfig()
    config.update_dynamic_config_params(_run_config)  # Required before any actual run
    config.validate_config(_run_config)
    run_experiment(_run_config)
