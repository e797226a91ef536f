"""
Binary frames for WireMessage objects, and transcript files (concatenated frames).

Frame layout (all integers little-endian):
    u32 body length | body | u32 CRC32 of body
Body:
    u8 version | u8 kind | u32 round | u32 step | u32 client | fields...
The version byte is the first byte of the body, right after the length prefix.
Field:
    u8 tag | u32 content length | content
Tensor content:
    u8 'Q' or 'D' | u8 ndim | u32 dims...  then
    'Q': u8 bits | f64 lo | f64 hi | codes (u8, u16 or u32 depending on bits)
    'D': f64 values
"""

import math
import pathlib
import struct
import zlib
from typing import List, NamedTuple, Tuple, Union, Iterator

import numpy as np

from model.backbone import ParamBlock, ExitHead
from model.quantization import QuantizedTensor, code_dtype, MAX_BITS
from protocol.messages import (WireMessage, MessageKind, FieldTag, FieldType, DenseTensor, Indicator,
                               PAYLOAD_CLASSES)
from utils.exception import EncodeError, DecodeError, ProtocolError


FRAME_VERSION = 1

_U32 = struct.Struct('<I')
_HEADER = struct.Struct('<BBIII')
_FIELD = struct.Struct('<BI')
_QHEAD = struct.Struct('<Bdd')
_LAYER_HEAD = struct.Struct('<BH')
_LAYER_ROLES = {0: ParamBlock, 1: ExitHead}


class RawField(NamedTuple):
    tag: int
    offset: int  # absolute offset of the field's content
    content: bytes


class RawFrame(NamedTuple):
    """ A frame split into header and fields, without any schema validation. """
    offset: int
    size: int  # total bytes, including length prefix and CRC
    version: int
    kind: int
    round_index: int
    step: int
    client: int
    fields: Tuple[RawField, ...]


# ================================================= Encoding ====================================================

def _encode_tensor(t: Union[QuantizedTensor, DenseTensor]) -> bytes:
    shape = t.shape
    if len(shape) == 0:
        raise EncodeError("Cannot encode a scalar tensor")
    if math.prod(shape) == 0:
        raise EncodeError("Cannot encode an empty tensor (shape {})".format(shape))
    if len(shape) > 255:
        raise EncodeError("Too many dimensions ({})".format(len(shape)))
    parts = [b'Q' if isinstance(t, QuantizedTensor) else b'D', bytes([len(shape)])]
    parts += [_U32.pack(s) for s in shape]
    if isinstance(t, QuantizedTensor):
        parts.append(_QHEAD.pack(t.bits, t.lo, t.hi))
        parts.append(np.ascontiguousarray(t.codes, dtype=code_dtype(t.bits)).tobytes())
    else:
        if not np.all(np.isfinite(t.data)):
            raise EncodeError("Cannot encode non-finite values")
        parts.append(np.ascontiguousarray(t.data, dtype='<f8').tobytes())
    return b''.join(parts)


def _encode_layer(layer) -> bytes:
    role = 1 if isinstance(layer, ExitHead) else 0
    w, b = _encode_tensor(DenseTensor(layer.weights)), _encode_tensor(DenseTensor(layer.bias))
    return _LAYER_HEAD.pack(role, layer.depth_index) + _U32.pack(len(w)) + w + b


def _encode_field(tag: FieldTag, field_type: FieldType, value) -> List[bytes]:
    if field_type in (FieldType.QUANTIZED, FieldType.DENSE):
        contents = [_encode_tensor(value)]
    elif field_type == FieldType.UINT:
        contents = [_U32.pack(value)]
    elif field_type == FieldType.BITS:
        if len(value) == 0:
            raise EncodeError("Cannot encode an empty indicator")
        contents = [_U32.pack(len(value)) + np.packbits(value.bits, bitorder='little').tobytes()]
    elif field_type == FieldType.LAYERS:
        if len(value) == 0:
            raise EncodeError("Cannot encode a model message without layers")
        contents = [_encode_layer(layer) for layer in value]
    else:
        raise EncodeError("Unknown field type {}".format(field_type))
    return [_FIELD.pack(int(tag), len(c)) + c for c in contents]


def encode(msg: WireMessage) -> bytes:
    body = [_HEADER.pack(FRAME_VERSION, int(msg.kind), msg.round_index, msg.step, msg.client)]
    for tag, name, field_type in msg.payload.SCHEMA:
        body += _encode_field(tag, field_type, getattr(msg.payload, name))
    body = b''.join(body)
    return _U32.pack(len(body)) + body + _U32.pack(zlib.crc32(body))


# ================================================= Decoding ====================================================

def parse_frame(buf: bytes, offset: int = 0) -> RawFrame:
    """ Splits the frame starting at offset into header and raw fields (length and CRC are checked). """
    if offset + _U32.size > len(buf):
        raise DecodeError(offset, "truncated length prefix")
    body_len = _U32.unpack_from(buf, offset)[0]
    body_start = offset + _U32.size
    body_end = body_start + body_len
    if body_end + _U32.size > len(buf):
        raise DecodeError(offset, "truncated frame ({} body bytes announced, {} available)"
                          .format(body_len, max(0, len(buf) - body_start - _U32.size)))
    body = bytes(buf[body_start:body_end])
    crc = _U32.unpack_from(buf, body_end)[0]
    if crc != zlib.crc32(body):
        raise DecodeError(offset, "CRC mismatch")
    if body_len < _HEADER.size:
        raise DecodeError(body_start, "truncated header")
    version, kind, round_index, step, client = _HEADER.unpack_from(body, 0)
    if version != FRAME_VERSION:
        raise DecodeError(body_start, "unsupported frame version {}".format(version))
    fields, pos = list(), _HEADER.size
    while pos < body_len:
        if pos + _FIELD.size > body_len:
            raise DecodeError(body_start + pos, "truncated field header")
        tag, content_len = _FIELD.unpack_from(body, pos)
        pos += _FIELD.size
        if pos + content_len > body_len:
            raise DecodeError(body_start + pos, "truncated field content (tag {})".format(tag))
        fields.append(RawField(tag, body_start + pos, body[pos:pos + content_len]))
        pos += content_len
    return RawFrame(offset, body_end + _U32.size - offset, version, kind, round_index, step, client, tuple(fields))


def iter_raw_frames(buf: bytes) -> Iterator[RawFrame]:
    offset = 0
    while offset < len(buf):
        frame = parse_frame(buf, offset)
        yield frame
        offset += frame.size


class _Reader:
    def __init__(self, field: RawField):
        self.data, self.base, self.pos = field.content, field.offset, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError(self.base + self.pos, "truncated field content")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, s: struct.Struct):
        return s.unpack(self.take(s.size))

    def check_end(self):
        if self.pos != len(self.data):
            raise DecodeError(self.base + self.pos, "{} unexpected trailing bytes".format(len(self.data) - self.pos))


def _decode_tensor(reader: _Reader):
    start = reader.base + reader.pos
    marker = reader.take(1)
    ndim = reader.take(1)[0]
    if ndim == 0:
        raise DecodeError(start, "scalar tensor (payload tensors have at least 1 dimension)")
    shape = tuple(reader.unpack(_U32)[0] for _ in range(ndim))
    count = math.prod(shape)
    if count == 0:
        raise DecodeError(start, "empty tensor")
    if marker == b'Q':
        bits, lo, hi = reader.unpack(_QHEAD)
        if not 1 <= bits <= MAX_BITS or not hi >= lo:
            raise DecodeError(start, "invalid quantization header (bits={}, lo={}, hi={})".format(bits, lo, hi))
        dtype = code_dtype(bits)
        codes = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype).reshape(shape)
        if codes.max() > 2 ** bits - 1:
            raise DecodeError(start, "quantization code out of range")
        return QuantizedTensor(shape, bits, lo, hi, codes.copy())
    elif marker == b'D':
        data = np.frombuffer(reader.take(count * 8), dtype='<f8').reshape(shape)
        return DenseTensor(data.astype(np.float64))
    raise DecodeError(start, "unknown tensor marker {!r}".format(marker))


def _decode_field(field: RawField, field_type: FieldType):
    reader = _Reader(field)
    if field_type in (FieldType.QUANTIZED, FieldType.DENSE):
        value = _decode_tensor(reader)
        expected = QuantizedTensor if field_type == FieldType.QUANTIZED else DenseTensor
        if not isinstance(value, expected):
            raise DecodeError(field.offset, "field {} must hold a {} tensor".format(field.tag, field_type.value))
    elif field_type == FieldType.UINT:
        value = reader.unpack(_U32)[0]
    elif field_type == FieldType.BITS:
        count = reader.unpack(_U32)[0]
        if count == 0:
            raise DecodeError(field.offset, "empty indicator")
        packed = np.frombuffer(reader.take((count + 7) // 8), dtype=np.uint8)
        value = Indicator(np.unpackbits(packed, count=count, bitorder='little'))
    elif field_type == FieldType.LAYERS:
        role, depth = reader.unpack(_LAYER_HEAD)
        if role not in _LAYER_ROLES:
            raise DecodeError(field.offset, "unknown layer role {}".format(role))
        w_len = reader.unpack(_U32)[0]
        w_reader = _Reader(RawField(field.tag, reader.base + reader.pos, reader.take(w_len)))
        weights = _decode_tensor(w_reader)
        w_reader.check_end()
        bias = _decode_tensor(reader)
        if not isinstance(weights, DenseTensor) or not isinstance(bias, DenseTensor) \
                or weights.data.ndim != 2 or bias.data.shape != (weights.data.shape[1], ):
            raise DecodeError(field.offset, "inconsistent layer parameters")
        value = _LAYER_ROLES[role](depth, weights.data, bias.data)
    else:
        raise DecodeError(field.offset, "unknown field type")
    reader.check_end()
    return value


def message_from_raw(frame: RawFrame) -> WireMessage:
    """ Schema validation of a raw frame: known kind, exactly the expected fields, in order. """
    body_start = frame.offset + _U32.size
    try:
        payload_cls = PAYLOAD_CLASSES[MessageKind(frame.kind)]
    except ValueError:
        raise DecodeError(body_start + 1, "unknown message kind {}".format(frame.kind))
    values, fields = dict(), list(frame.fields)
    for tag, name, field_type in payload_cls.SCHEMA:
        if field_type == FieldType.LAYERS:
            matching = list()
            while len(fields) > 0 and fields[0].tag == tag:
                matching.append(_decode_field(fields.pop(0), field_type))
            if len(matching) == 0:
                raise DecodeError(body_start, "missing field {} in {} frame".format(tag.name, payload_cls.__name__))
            values[name] = matching
        else:
            if len(fields) == 0 or fields[0].tag != tag:
                where = fields[0].offset if len(fields) > 0 else body_start
                raise DecodeError(where, "expected field {} in {} frame".format(tag.name, payload_cls.__name__))
            values[name] = _decode_field(fields.pop(0), field_type)
    if len(fields) > 0:
        raise DecodeError(fields[0].offset, "unexpected field with tag {}".format(fields[0].tag))
    try:
        payload = payload_cls(**values)
    except (ValueError, TypeError, IndexError, KeyError, ProtocolError) as e:
        raise DecodeError(body_start, "invalid payload: {}".format(e))
    return WireMessage(payload, frame.round_index, frame.step, frame.client)


def decode_at(buf: bytes, offset: int = 0) -> Tuple[WireMessage, int]:
    """ Decodes the frame starting at offset. Returns the message and the offset of the next frame. """
    frame = parse_frame(buf, offset)
    return message_from_raw(frame), offset + frame.size


def decode(buf: bytes) -> WireMessage:
    """ Decodes a buffer which must contain exactly one frame. """
    msg, end = decode_at(buf, 0)
    if end != len(buf):
        raise DecodeError(end, "{} trailing bytes after the frame".format(len(buf) - end))
    return msg


# ================================================ Transcripts ==================================================

def read_transcript_bytes(path: Union[str, pathlib.Path]) -> bytes:
    with open(path, 'rb') as f:
        return f.read()


def write_transcript(path: Union[str, pathlib.Path], frames: List[bytes]):
    with open(path, 'wb') as f:
        for frame in frames:
            f.write(frame)


def decode_transcript(buf: bytes) -> List[WireMessage]:
    return [message_from_raw(frame) for frame in iter_raw_frames(buf)]
