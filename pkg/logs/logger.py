import datetime
import json
import os
import pathlib
import pickle
import time
from typing import Dict, List, Sequence

import humanize
import pandas as pd

import config
from logs.metrics import RoundMetrics, METRICS_COLUMNS
from model.checkpoint import CheckpointEntity, CLIENT, SERVER, save_checkpoint
from protocol import codec

_erase_security_time_s = 0.0

# Files written by a run. Erasing a previous run removes these files only.
METRICS_FILE = 'metrics.csv'
SUMMARY_FILE = 'summary.txt'
CHECKPOINT_FILE = 'checkpoint.hsfl'
TRANSCRIPT_FILE = 'transcript.bin'
DATASET_FILE = 'dataset.csv'
RUN_FILES = ('config.json', 'config.pickle', METRICS_FILE, SUMMARY_FILE, CHECKPOINT_FILE, TRANSCRIPT_FILE,
             DATASET_FILE)


def erase_run_data(run_dir: pathlib.Path, verbosity=1):
    """ Erases all files of a previous run (other files of the directory are left untouched). """
    if _erase_security_time_s > 0.1:
        print("[RunLogger] *** WARNING *** run '{}' will be erased in {} seconds. Stop this program to cancel ***"
              .format(run_dir, _erase_security_time_s))
        time.sleep(_erase_security_time_s)
    elif verbosity >= 1:
        print("[RunLogger] Run '{}' will be erased.".format(run_dir))
    for name in RUN_FILES:
        path = run_dir.joinpath(name)
        if path.exists():
            os.remove(path)


def format_summary_value(value) -> str:
    if isinstance(value, float):
        return '{:.6g}'.format(value)
    return str(value)


def summary_text(summary: Dict) -> str:
    """ Flat 'key = value' lines, in insertion order. """
    return ''.join('{} = {}\n'.format(k, format_summary_value(v)) for k, v in summary.items())


class RunLogger:
    """ Class for saving interesting data during a simulation run:
     - config as json and pickle files
     - per-round metrics (CSV file, rewritten after each round)
     - summary, final checkpoint and optional transcript / dataset

     See ../README.md to get more info on storage locations.
     """
    def __init__(self, run_config: config.RunConfig):
        self.run_config = run_config  # stored but not modified by this class
        self.verbosity = run_config.verbosity
        self.run_dir = pathlib.Path(run_config.output_dir)
        self.rows: List[Dict] = list()
        self.round_start_datetimes: List[datetime.datetime] = list()
        try:
            if self.run_dir.exists() and any(self.run_dir.joinpath(name).exists() for name in RUN_FILES):
                if not run_config.allow_erase_run:
                    raise RuntimeError("Config does not allow to erase the previous run in '{}'".format(self.run_dir))
                erase_run_data(self.run_dir, self.verbosity)
            os.makedirs(self.run_dir, exist_ok=True)
        except OSError as e:
            raise OSError("Cannot prepare the run directory '{}': {}".format(self.run_dir, e)) from e
        if self.verbosity >= 1:
            print("[RunLogger] Starting logging into '{}'".format(self.run_dir))

    def path(self, name: str) -> pathlib.Path:
        return self.run_dir.joinpath(name)

    def write_config(self):
        """ Writes the config to a JSON file, also pickles it to reload it easily """
        with open(self.path('config.json'), 'w') as f:
            json.dump(self.run_config.as_dict(), f, indent=1, sort_keys=True)
        with open(self.path('config.pickle'), 'wb') as f:
            pickle.dump(self.run_config, f)

    @property
    def config_from_json_file(self):
        with open(self.path('config.json'), 'r') as f:
            return json.load(f)

    @property
    def config_from_pickle_file(self) -> config.RunConfig:
        with open(self.path('config.pickle'), 'rb') as f:
            return pickle.load(f)

    def on_round_starts(self, round_index: int):
        self.round_start_datetimes.append(datetime.datetime.now())

    def on_round_finished(self, metrics: RoundMetrics):
        self.rows.append(metrics.as_dict())
        self.write_metrics()
        if self.verbosity >= 1 and len(self.round_start_datetimes) > 0:
            now = datetime.datetime.now()
            round_duration = (now - self.round_start_datetimes[-1]).total_seconds()
            avg_duration_s = (now - self.round_start_datetimes[0]).total_seconds() / len(self.round_start_datetimes)
            remaining = datetime.timedelta(
                seconds=int(avg_duration_s * (self.run_config.train.rounds - metrics.round_index - 1)))
            print("[RunLogger] End of round {}/{}: objective={:.4f} |grad|^2={:.3e} l_C={:.4f} l_S={:.4f} "
                  "l_CSA={:.4f} up={} down={}. Duration={:.1f}s. Estimated remaining time: {}"
                  .format(metrics.round_index + 1, self.run_config.train.rounds, metrics.objective,
                          metrics.grad_norm_sq, metrics.loss_c, metrics.loss_s, metrics.loss_csa,
                          humanize.naturalsize(metrics.bytes_up), humanize.naturalsize(metrics.bytes_down),
                          round_duration, humanize.naturaldelta(remaining)))

    @property
    def metrics_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(METRICS_COLUMNS))

    def write_metrics(self):
        self.write_file(METRICS_FILE, lambda p: self.metrics_dataframe.to_csv(p, index=False))

    def write_summary(self, summary: Dict) -> str:
        text = summary_text(summary)
        self.write_file(SUMMARY_FILE, lambda p: p.write_text(text))
        return text

    def save_checkpoint(self, clients: Sequence, server):
        entities = [CheckpointEntity(c.client_id, CLIENT, c.params) for c in clients]
        entities.append(CheckpointEntity(len(clients), SERVER, server.params))
        save_checkpoint(self.path(CHECKPOINT_FILE), entities)

    def write_transcript(self, frames: Sequence[bytes]):
        self.write_file(TRANSCRIPT_FILE, lambda p: codec.write_transcript(p, frames))

    def write_file(self, name: str, write_fn):
        path = self.path(name)
        try:
            write_fn(path)
        except OSError as e:
            raise OSError("Cannot write '{}': {}".format(path, e)) from e

    def on_training_finished(self):
        if self.verbosity >= 1:
            print("[RunLogger] Simulation has finished ({} rounds logged into '{}')".format(len(self.rows),
                                                                                       self.run_dir))
