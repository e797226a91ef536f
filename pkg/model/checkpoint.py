"""
HSFL checkpoint files: parameters of all clients and of the main server, stored as 32-bit floats.

    magic b'HSFL' | u8 version | u32 entity count | entities...
Entity:
    u32 entity id | u8 kind (0 client, 1 server) | u32 layer count | layers...
Layer:
    u16 depth | u8 role (0 block, 1 head) | u32 in_dim | u32 out_dim | f32 weights (row-major) | f32 bias
All values are little-endian.
"""

import pathlib
import struct
from typing import List, NamedTuple, Sequence, Union

import numpy as np

from model.backbone import AffineLayer, ParamBlock, ExitHead
from utils.exception import CheckpointError


MAGIC = b'HSFL'
VERSION = 1
CLIENT, SERVER = 0, 1

_ENTITY_COUNT = struct.Struct('<I')
_ENTITY = struct.Struct('<IBI')
_LAYER = struct.Struct('<HBII')
_ROLES = {0: ParamBlock, 1: ExitHead}


class CheckpointEntity(NamedTuple):
    entity_id: int
    kind: int
    layers: List[AffineLayer]

    @property
    def kind_name(self):
        return 'server' if self.kind == SERVER else 'client'

    @property
    def num_params(self):
        return sum(layer.num_params for layer in self.layers)


def checkpoint_bytes(entities: Sequence[CheckpointEntity]) -> bytes:
    parts = [MAGIC, bytes([VERSION]), _ENTITY_COUNT.pack(len(entities))]
    for e in entities:
        parts.append(_ENTITY.pack(e.entity_id, e.kind, len(e.layers)))
        for layer in e.layers:
            role = 1 if isinstance(layer, ExitHead) else 0
            parts.append(_LAYER.pack(layer.depth_index, role, layer.in_dim, layer.out_dim))
            parts.append(np.ascontiguousarray(layer.weights, dtype='<f4').tobytes())
            parts.append(np.ascontiguousarray(layer.bias, dtype='<f4').tobytes())
    return b''.join(parts)


def save_checkpoint(path: Union[str, pathlib.Path], entities: Sequence[CheckpointEntity]):
    try:
        with open(path, 'wb') as f:
            f.write(checkpoint_bytes(entities))
    except OSError as e:
        raise CheckpointError("Cannot write checkpoint '{}': {}".format(path, e))


def parse_checkpoint(buf: bytes) -> List[CheckpointEntity]:
    if len(buf) < len(MAGIC) + 1 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("Bad magic: not an HSFL checkpoint")
    version = buf[len(MAGIC)]
    if version != VERSION:
        raise CheckpointError("Unsupported checkpoint version {}".format(version))
    pos = len(MAGIC) + 1

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("Truncated checkpoint at byte offset {}".format(pos))
        chunk = buf[pos:pos + n]
        pos += n
        return chunk
    entity_count = _ENTITY_COUNT.unpack(take(_ENTITY_COUNT.size))[0]
    entities = list()
    for _ in range(entity_count):
        entity_id, kind, layer_count = _ENTITY.unpack(take(_ENTITY.size))
        if kind not in (CLIENT, SERVER):
            raise CheckpointError("Unknown entity kind {} at byte offset {}".format(kind, pos - _ENTITY.size))
        layers = list()
        for _ in range(layer_count):
            depth, role, in_dim, out_dim = _LAYER.unpack(take(_LAYER.size))
            if role not in _ROLES:
                raise CheckpointError("Unknown layer role {} at byte offset {}".format(role, pos - _LAYER.size))
            weights = np.frombuffer(take(4 * in_dim * out_dim), dtype='<f4').reshape(in_dim, out_dim)
            bias = np.frombuffer(take(4 * out_dim), dtype='<f4')
            layers.append(_ROLES[role](depth, weights.astype(np.float64), bias.astype(np.float64)))
        entities.append(CheckpointEntity(entity_id, kind, layers))
    if pos != len(buf):
        raise CheckpointError("{} unexpected trailing bytes at byte offset {}".format(len(buf) - pos, pos))
    return entities


def load_checkpoint(path: Union[str, pathlib.Path]) -> List[CheckpointEntity]:
    try:
        with open(path, 'rb') as f:
            buf = f.read()
    except OSError as e:
        raise CheckpointError("Cannot read checkpoint '{}': {}".format(path, e))
    return parse_checkpoint(buf)
