"""
Easy-to-use metrics classes
"""

from typing import Dict, Optional

import numpy as np

from utils.exception import check_nan_values


class RoundMetric:
    """ Can store per-step metric values in order to compute a round-averaged metric. """
    def __init__(self):
        self.buffer = list()

    def on_new_round(self):
        self.buffer = list()

    def append(self, value):
        self.buffer.append(float(value))

    def extend(self, values):
        self.buffer += [float(v) for v in values]

    def __len__(self):
        return len(self.buffer)

    def get(self, default: Optional[float] = None):
        """ Returns the mean of values stored since last call to on_new_round() """
        if len(self.buffer) == 0:
            if default is not None:
                return default
            raise ValueError()
        return float(np.asarray(self.buffer).mean())

    @property
    def value(self):
        return self.get()


class RunningMinimum:
    """ Minimum of all values appended so far (non-increasing by construction). """
    def __init__(self):
        self.history = list()

    def append(self, value):
        value = float(value)
        self.history.append(value if len(self.history) == 0 else min(self.history[-1], value))

    def get(self):
        if len(self.history) == 0:
            raise ValueError()
        return self.history[-1]

    @property
    def value(self):
        return self.get()


METRICS_COLUMNS = ('round', 'objective', 'grad_norm_sq', 'loss_c', 'loss_s', 'loss_csa', 'bytes_up', 'bytes_down',
                   'local_exit_rate', 'wall_ms')


class RoundMetrics:
    def __init__(self, round_index: int, objective: float, grad_norm_sq: float, loss_c: float, loss_s: float,
                 loss_csa: float, bytes_up: int, bytes_down: int, local_exit_rate: float, wall_ms: float = 0.0):
        """ One row of the metrics file. Objective, gradient norm and exit rate are probed at the parameters
        which start the round; losses and traffic are those of the round's local steps. """
        self.round_index = int(round_index)
        self.objective, self.grad_norm_sq = float(objective), float(grad_norm_sq)
        self.loss_c, self.loss_s, self.loss_csa = float(loss_c), float(loss_s), float(loss_csa)
        self.bytes_up, self.bytes_down = int(bytes_up), int(bytes_down)
        self.local_exit_rate = float(local_exit_rate)
        self.wall_ms = float(wall_ms)
        check_nan_values(self.round_index, self.objective, self.grad_norm_sq, self.loss_c, self.loss_s,
                         self.loss_csa, self.local_exit_rate, self.wall_ms)
        if self.grad_norm_sq < 0.0:
            raise ValueError("Round {}: negative squared gradient norm".format(round_index))

    def as_dict(self) -> Dict:
        return {'round': self.round_index, 'objective': self.objective, 'grad_norm_sq': self.grad_norm_sq,
                'loss_c': self.loss_c, 'loss_s': self.loss_s, 'loss_csa': self.loss_csa,
                'bytes_up': self.bytes_up, 'bytes_down': self.bytes_down,
                'local_exit_rate': self.local_exit_rate, 'wall_ms': self.wall_ms}

    def __eq__(self, other):
        if not isinstance(other, RoundMetrics):
            return NotImplemented
        return self.as_dict() == other.as_dict()

    def __repr__(self):
        return "RoundMetrics({})".format(", ".join("{}={}".format(k, v) for k, v in self.as_dict().items()))
