"""
Custom exception classes and functions to perform checks and throw errors if required.
"""

import math
from typing import Optional

import numpy as np


class ModelConvergenceError(ValueError):
    pass


class ShapeError(ValueError):
    """ Tensor shape does not match the backbone template (message names the block or depth). """
    pass


class DepthError(ValueError):
    """ Depth outside the template, the exit set, or the layers owned by an entity. """
    pass


class TapeError(RuntimeError):
    """ Loss not recorded on the tape, or stale/already consumed tape. """
    pass


class KeyMismatchError(KeyError):
    pass


class PartitionError(ValueError):
    pass


class StructuralError(ValueError):
    """ Inconsistent per-depth structure found during aggregation. """
    pass


class EncodeError(ValueError):
    pass


class DecodeError(ValueError):
    def __init__(self, offset: int, reason: str):
        super().__init__("Cannot decode frame at byte offset {}: {}".format(offset, reason))
        self.offset = offset
        self.reason = reason


class ProtocolError(RuntimeError):
    pass


class ServerUnreachableError(ConnectionError):
    pass


class CheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    def __init__(self, key: str, reason: str):
        super().__init__("Invalid config value for '{}': {}".format(key, reason))
        self.key = key
        self.reason = reason


class RoundError(RuntimeError):
    """ Wraps an error raised by a module during a round, with the round (and client) context. """
    def __init__(self, round_index: int, client_id: Optional[int], cause: Exception):
        where = "round {}".format(round_index) if client_id is None \
            else "round {}, client {}".format(round_index, client_id)
        super().__init__("Round aborted ({}): {}: {}".format(where, type(cause).__name__, cause))
        self.round_index = round_index
        self.client_id = client_id
        self.cause = cause


def check_nan_values(round_index, *args):
    """
    Raises a ModelConvergenceError if any array (in args) contains a nan or inf value.

    :param round_index: Current training round (used in the error message)
    :param args: numpy arrays to be tested - floats are accepted
    """
    for i, t in enumerate(args):
        if isinstance(t, float):
            if not math.isfinite(t):
                raise ModelConvergenceError("Round {}: float from *args (#{}) is not finite".format(round_index, i))
        elif isinstance(t, np.ndarray):
            if not np.all(np.isfinite(t)):
                raise ModelConvergenceError("Round {}: array from *args (#{}) contains a non-finite item"
                                            .format(round_index, i))
        else:
            raise ValueError("Unexpected type {} in *args".format(type(t)))
