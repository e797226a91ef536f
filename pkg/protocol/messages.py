"""
Typed messages exchanged between clients and servers. These are the only objects which cross the
client/server boundary.

Payload classes have no constructor argument able to hold class labels: supervision crosses the boundary
only as a pairwise same-class Indicator. Client-to-server features must be quantized.
"""

import enum
from typing import Tuple, Sequence

import numpy as np

from model.backbone import AffineLayer
from model.quantization import QuantizedTensor
from utils.exception import ProtocolError


class MessageKind(enum.IntEnum):
    FEATURE_PAIR = 1
    TASK_FEATURE = 2
    TASK_LOGITS = 3
    UPSTREAM_GRAD = 4
    CUT_GRAD = 5
    MODEL_UPLOAD = 6
    MODEL_DOWNLOAD = 7
    INFERENCE_FEATURE = 8
    INFERENCE_LOGITS = 9


# Messages sent by clients (to the main server, or to the fed server for model uploads)
UPSTREAM_KINDS = frozenset({MessageKind.FEATURE_PAIR, MessageKind.TASK_FEATURE, MessageKind.UPSTREAM_GRAD,
                            MessageKind.MODEL_UPLOAD, MessageKind.INFERENCE_FEATURE})


class FieldTag(enum.IntEnum):
    Z_DAGGER = 1
    Z_DDAGGER = 2
    FEATURE = 3
    EXIT_DEPTH = 4
    SPLIT_DEPTH = 5
    INDICATOR = 6
    LOGITS = 7
    GRADIENT = 8
    LAYER = 9
    LABELS = 0xEE  # Reserved, never produced: its presence in a raw frame is a privacy violation


class FieldType(enum.Enum):
    QUANTIZED = 'quantized'
    DENSE = 'dense'
    UINT = 'uint'
    BITS = 'bits'
    LAYERS = 'layers'  # repeated field


class DenseTensor:
    """ Unquantized float64 tensor (gradients, server logits, model parameters). """
    def __init__(self, data):
        self.data = np.array(data, dtype=np.float64)

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    def __repr__(self):
        return "DenseTensor(shape={})".format(self.data.shape)


class Indicator:
    """ Per-pair same-class bits I[i] = 1(y1[i] == y2[i]). """
    def __init__(self, bits):
        bits = np.asarray(bits)
        if bits.ndim != 1 or not np.all((bits == 0) | (bits == 1)):
            raise ProtocolError("An indicator must be a vector of 0/1 bits")
        self.bits = bits.astype(np.uint8)

    @staticmethod
    def from_label_pairs(y1: np.ndarray, y2: np.ndarray) -> 'Indicator':
        y1, y2 = np.asarray(y1).reshape(-1), np.asarray(y2).reshape(-1)
        if y1.shape != y2.shape:
            raise ProtocolError("Label batches of different sizes {} and {}".format(y1.shape, y2.shape))
        return Indicator((y1 == y2).astype(np.uint8))

    def __len__(self):
        return self.bits.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Indicator):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return "Indicator({}/{} positive)".format(int(self.bits.sum()), len(self))


class Payload:
    KIND: MessageKind = None
    SCHEMA: Tuple[Tuple[FieldTag, str, FieldType], ...] = ()

    def _check_field_types(self):
        for tag, name, field_type in self.SCHEMA:
            value = getattr(self, name)
            expected = {FieldType.QUANTIZED: QuantizedTensor, FieldType.DENSE: DenseTensor, FieldType.UINT: int,
                        FieldType.BITS: Indicator, FieldType.LAYERS: tuple}[field_type]
            if not isinstance(value, expected):
                raise ProtocolError("{}.{} must be a {} (got {})".format(type(self).__name__, name,
                                                                         expected.__name__, type(value).__name__))
            if field_type == FieldType.LAYERS and not all(isinstance(layer, AffineLayer) for layer in value):
                raise ProtocolError("{}.{} must only contain layers".format(type(self).__name__, name))

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        for _, name, field_type in self.SCHEMA:
            a, b = getattr(self, name), getattr(other, name)
            if field_type == FieldType.LAYERS:
                if len(a) != len(b) or not all(la.same_values(lb) for la, lb in zip(a, b)):
                    return False
            elif not a == b:
                return False
        return True

    def __repr__(self):
        return "{}({})".format(type(self).__name__,
                               ", ".join("{}={}".format(n, getattr(self, n)) for _, n, _ in self.SCHEMA))


class FeaturePair(Payload):
    """ Branch-dagger view (quantized) at exit depth K, with the pairwise indicator. """
    KIND = MessageKind.FEATURE_PAIR
    SCHEMA = ((FieldTag.Z_DAGGER, 'z_dagger', FieldType.QUANTIZED),
              (FieldTag.EXIT_DEPTH, 'exit_depth', FieldType.UINT),
              (FieldTag.INDICATOR, 'indicator', FieldType.BITS))

    def __init__(self, z_dagger: QuantizedTensor, exit_depth: int, indicator: Indicator):
        self.z_dagger, self.exit_depth, self.indicator = z_dagger, int(exit_depth), indicator
        self._check_field_types()
        if len(indicator) != z_dagger.shape[0]:
            raise ProtocolError("Indicator length {} does not match the {} paired features"
                                .format(len(indicator), z_dagger.shape[0]))


class TaskFeature(Payload):
    """ Branch-double-dagger view (quantized) at the client's split depth. """
    KIND = MessageKind.TASK_FEATURE
    SCHEMA = ((FieldTag.Z_DDAGGER, 'z_ddagger', FieldType.QUANTIZED),
              (FieldTag.SPLIT_DEPTH, 'split_depth', FieldType.UINT))

    def __init__(self, z_ddagger: QuantizedTensor, split_depth: int):
        self.z_ddagger, self.split_depth = z_ddagger, int(split_depth)
        self._check_field_types()


class TaskLogits(Payload):
    KIND = MessageKind.TASK_LOGITS
    SCHEMA = ((FieldTag.LOGITS, 'logits', FieldType.DENSE), )

    def __init__(self, logits: DenseTensor):
        self.logits = logits
        self._check_field_types()


class UpstreamGrad(Payload):
    """ Gradient of the server task loss w.r.t. the returned logits. """
    KIND = MessageKind.UPSTREAM_GRAD
    SCHEMA = ((FieldTag.GRADIENT, 'gradient', FieldType.DENSE), )

    def __init__(self, gradient: DenseTensor):
        self.gradient = gradient
        self._check_field_types()


class CutGrad(Payload):
    """ Gradient w.r.t. the offloaded features (at the cut). """
    KIND = MessageKind.CUT_GRAD
    SCHEMA = ((FieldTag.GRADIENT, 'gradient', FieldType.DENSE), )

    def __init__(self, gradient: DenseTensor):
        self.gradient = gradient
        self._check_field_types()


class ModelUpload(Payload):
    KIND = MessageKind.MODEL_UPLOAD
    SCHEMA = ((FieldTag.LAYER, 'layers', FieldType.LAYERS), )

    def __init__(self, layers: Sequence[AffineLayer]):
        self.layers = tuple(layers)
        self._check_field_types()


class ModelDownload(Payload):
    KIND = MessageKind.MODEL_DOWNLOAD
    SCHEMA = ((FieldTag.LAYER, 'layers', FieldType.LAYERS), )

    def __init__(self, layers: Sequence[AffineLayer]):
        self.layers = tuple(layers)
        self._check_field_types()


class InferenceFeature(Payload):
    KIND = MessageKind.INFERENCE_FEATURE
    SCHEMA = ((FieldTag.FEATURE, 'feature', FieldType.QUANTIZED),
              (FieldTag.SPLIT_DEPTH, 'split_depth', FieldType.UINT))

    def __init__(self, feature: QuantizedTensor, split_depth: int):
        self.feature, self.split_depth = feature, int(split_depth)
        self._check_field_types()


class InferenceLogits(Payload):
    KIND = MessageKind.INFERENCE_LOGITS
    SCHEMA = ((FieldTag.LOGITS, 'logits', FieldType.DENSE), )

    def __init__(self, logits: DenseTensor):
        self.logits = logits
        self._check_field_types()


PAYLOAD_CLASSES = {cls.KIND: cls for cls in (FeaturePair, TaskFeature, TaskLogits, UpstreamGrad, CutGrad,
                                             ModelUpload, ModelDownload, InferenceFeature, InferenceLogits)}


class WireMessage:
    def __init__(self, payload: Payload, round_index: int, step: int, client: int):
        if not isinstance(payload, Payload) or payload.KIND is None:
            raise ProtocolError("Invalid payload {}".format(payload))
        for name, v in (('round', round_index), ('step', step), ('client', client)):
            if not 0 <= int(v) < 2 ** 32:
                raise ProtocolError("{} must fit in an unsigned 32-bit int (got {})".format(name, v))
        self.payload = payload
        self.round_index, self.step, self.client = int(round_index), int(step), int(client)

    @property
    def kind(self) -> MessageKind:
        return self.payload.KIND

    @property
    def upstream(self) -> bool:
        """ True if sent by a client. """
        return self.kind in UPSTREAM_KINDS

    def __eq__(self, other):
        if not isinstance(other, WireMessage):
            return NotImplemented
        return (self.round_index, self.step, self.client) == (other.round_index, other.step, other.client) \
            and self.payload == other.payload

    def __repr__(self):
        return "WireMessage({}, round={}, step={}, client={})".format(self.kind.name, self.round_index,
                                                                      self.step, self.client)
