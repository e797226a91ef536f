import pathlib
import struct
import tempfile
import unittest
import zlib

import numpy as np

from model.backbone import ParamBlock, ExitHead
from model.checkpoint import (CheckpointEntity, CLIENT, SERVER, checkpoint_bytes, parse_checkpoint, save_checkpoint,
                              load_checkpoint)
from model.quantization import QuantizedTensor, quantize
from protocol import codec
from protocol.audit import audit_privacy
from protocol.channel import Channel
from protocol.ledger import TrafficLedger
from protocol.messages import (WireMessage, FeaturePair, TaskFeature, TaskLogits, UpstreamGrad, CutGrad,
                               ModelUpload, ModelDownload, InferenceFeature, InferenceLogits, DenseTensor,
                               Indicator, FieldTag, MessageKind)
from utils.exception import DecodeError, EncodeError, ProtocolError, CheckpointError


def sample_layers(rng):
    return [ParamBlock(1, rng.normal(size=(3, 4)), rng.normal(size=4)),
            ExitHead(1, rng.normal(size=(4, 2)), rng.normal(size=2))]


def one_message_per_kind(seed=0):
    rng = np.random.default_rng(seed)
    q = quantize(rng.normal(size=(4, 3)), 8, rng)
    dense = DenseTensor(rng.normal(size=(4, 2)))
    payloads = [FeaturePair(q, 2, Indicator([1, 0, 0, 1])), TaskFeature(q, 3), TaskLogits(dense),
                UpstreamGrad(dense), CutGrad(DenseTensor(rng.normal(size=(4, 3)))),
                ModelUpload(sample_layers(rng)), ModelDownload(sample_layers(rng)),
                InferenceFeature(quantize(rng.normal(size=(1, 3)), 16, rng), 2), InferenceLogits(dense)]
    return [WireMessage(p, 7, k, 3) for k, p in enumerate(payloads)]


def tamper(frame: bytes, extra_fields: bytes) -> bytes:
    """ Appends raw fields to the body of a valid frame, with a consistent length prefix and CRC. """
    body = frame[4:-4] + extra_fields
    return struct.pack('<I', len(body)) + body + struct.pack('<I', zlib.crc32(body))


def scalar_feature_pair_frame() -> bytes:
    """ FeaturePair frame with a valid CRC, whose quantized view is a 0-d tensor. """
    tensor = b'Q' + bytes([0]) + struct.pack('<Bdd', 8, 0.0, 1.0) + bytes([3])
    bits = struct.pack('<I', 1) + bytes([1])
    body = struct.pack('<BBIII', codec.FRAME_VERSION, int(MessageKind.FEATURE_PAIR), 0, 0, 0)
    body += struct.pack('<BI', int(FieldTag.Z_DAGGER), len(tensor)) + tensor
    body += struct.pack('<BII', int(FieldTag.EXIT_DEPTH), 4, 2)
    body += struct.pack('<BI', int(FieldTag.INDICATOR), len(bits)) + bits
    return struct.pack('<I', len(body)) + body + struct.pack('<I', zlib.crc32(body))


class TestCodec(unittest.TestCase):
    def test_encode_decode(self):
        messages = one_message_per_kind()
        self.assertEqual({m.kind for m in messages}, set(MessageKind))
        for msg in messages:
            decoded = codec.decode(codec.encode(msg))
            self.assertEqual(decoded, msg, msg.kind.name)

    def test_transcript(self):
        messages = one_message_per_kind(1)
        buf = b''.join(codec.encode(m) for m in messages)
        self.assertEqual(codec.decode_transcript(buf), messages)
        self.assertEqual(codec.decode_transcript(b''), [])

    def test_corrupted_frame_offset(self):
        messages = one_message_per_kind(2)
        first, second = codec.encode(messages[0]), codec.encode(messages[1])
        corrupted = bytearray(first + second)
        corrupted[len(first) + 20] ^= 0xFF
        with self.assertRaises(DecodeError) as ctx:
            codec.decode_transcript(bytes(corrupted))
        self.assertEqual(ctx.exception.offset, len(first))

    def test_truncated_frame(self):
        frame = codec.encode(one_message_per_kind()[0])
        for end in (2, 10, len(frame) - 1):
            with self.assertRaises(DecodeError) as ctx:
                codec.decode(frame[:end])
            self.assertEqual(ctx.exception.offset, 0)

    def test_trailing_bytes(self):
        frame = codec.encode(one_message_per_kind()[2])
        with self.assertRaises(DecodeError) as ctx:
            codec.decode(frame + b'\x00')
        self.assertEqual(ctx.exception.offset, len(frame))

    def test_unknown_field_is_rejected(self):
        frame = codec.encode(one_message_per_kind()[2])
        with self.assertRaises(DecodeError):
            codec.decode(tamper(frame, struct.pack('<BI', 0x42, 1) + b'\x00'))

    def test_empty_tensor_cannot_be_encoded(self):
        msg = WireMessage(TaskLogits(DenseTensor(np.zeros((0, 3)))), 0, 0, 0)
        with self.assertRaises(EncodeError):
            codec.encode(msg)
        scalar = WireMessage(TaskFeature(QuantizedTensor((), 8, 0.0, 1.0, np.array(3)), 2), 0, 0, 0)
        with self.assertRaises(EncodeError):
            codec.encode(scalar)

    def test_scalar_tensor_frame(self):
        frame = scalar_feature_pair_frame()
        with self.assertRaises(DecodeError) as ctx:
            codec.decode(frame)
        # Content of the first field: length prefix, header, field header
        self.assertEqual(ctx.exception.offset, 4 + 14 + 5)
        with self.assertRaises(DecodeError):
            codec.decode_transcript(codec.encode(one_message_per_kind()[0]) + frame)

    def test_version_is_first_body_byte(self):
        frame = codec.encode(one_message_per_kind()[0])
        self.assertEqual(struct.unpack_from('<I', frame, 0)[0], len(frame) - 8)
        self.assertEqual(frame[4], codec.FRAME_VERSION)
        forged = bytearray(frame[4:-4])
        forged[0] = codec.FRAME_VERSION + 1
        forged = struct.pack('<I', len(forged)) + bytes(forged) + struct.pack('<I', zlib.crc32(bytes(forged)))
        with self.assertRaises(DecodeError) as ctx:
            codec.decode(forged)
        self.assertIn('version', ctx.exception.reason)

    def test_indicator_from_label_pairs(self):
        y = np.array([0, 2, 1, 1, 3])
        np.testing.assert_array_equal(Indicator.from_label_pairs(y, y).bits, np.ones(5))
        np.testing.assert_array_equal(Indicator.from_label_pairs(y, (y + 1) % 4).bits, np.zeros(5))
        np.testing.assert_array_equal(Indicator.from_label_pairs([0, 1, 2], [0, 2, 2]).bits, [1, 0, 1])
        with self.assertRaises(ProtocolError):
            Indicator.from_label_pairs([0, 1], [0, 1, 2])

    def test_payloads_have_no_label_argument(self):
        rng = np.random.default_rng(0)
        with self.assertRaises(TypeError):
            TaskFeature(quantize(rng.normal(size=(2, 3)), 8, rng), 2, labels=np.array([0, 1]))
        # Client features must be quantized
        with self.assertRaises(ProtocolError):
            TaskFeature(DenseTensor(rng.normal(size=(2, 3))), 2)
        with self.assertRaises(ProtocolError):
            FeaturePair(quantize(rng.normal(size=(2, 3)), 8, rng), 1, Indicator([1, 0, 1]))


class TestChannelAndLedger(unittest.TestCase):
    def test_channel_accounting(self):
        ledger = TrafficLedger()
        channel = Channel(5, 2, ledger, record_transcript=True)
        messages = one_message_per_kind()
        received = [channel.send(m.payload, step=1) for m in messages]
        self.assertEqual(received, [m.payload for m in messages])
        self.assertEqual(ledger.total_messages(), len(messages))
        self.assertEqual(ledger.total_bytes(), sum(len(f) for f in channel.frames))
        self.assertEqual(ledger.total_messages(upstream=True), 5)
        self.assertEqual(ledger.total_bytes(round_index=3), 0)
        df = ledger.to_dataframe()
        self.assertEqual(df['bytes'].sum(), ledger.total_bytes())
        self.assertTrue((df['client'] == 5).all())

    def test_ledger_merge(self):
        a, b = TrafficLedger(), TrafficLedger()
        Channel(0, 0, a).send(one_message_per_kind()[2].payload)
        Channel(1, 0, b).send(one_message_per_kind()[2].payload)
        total = a.total_bytes() + b.total_bytes()
        a.merge(b)
        self.assertEqual(a.total_bytes(), total)
        self.assertEqual(a.total_bytes(client=1), b.total_bytes())


class TestPrivacyAudit(unittest.TestCase):
    def test_clean_transcript(self):
        report = audit_privacy(one_message_per_kind())
        self.assertTrue(report.ok)
        self.assertEqual(report.frame_count, len(MessageKind))
        self.assertEqual(report.kind_counts['FEATURE_PAIR'], 1)
        self.assertIn('violations = 0', str(report))

    def test_empty_transcript(self):
        report = audit_privacy(b'')
        self.assertTrue(report.ok)
        self.assertEqual(report.frame_count, 0)

    def test_injected_label_field(self):
        frames = [codec.encode(m) for m in one_message_per_kind()]
        labels = np.array([0, 2, 1, 1], dtype=np.uint32).tobytes()
        frames[1] = tamper(frames[1], struct.pack('<BI', int(FieldTag.LABELS), len(labels)) + labels)
        report = audit_privacy(b''.join(frames))
        self.assertFalse(report.ok)
        self.assertEqual(len(report.violations), 1)
        self.assertIn('label field', report.violations[0])
        self.assertIn('@{}'.format(len(frames[0])), report.violations[0])

    def test_non_quantized_feature(self):
        rng = np.random.default_rng(0)
        frame = codec.encode(WireMessage(TaskLogits(DenseTensor(rng.normal(size=(2, 3)))), 0, 0, 0))
        # A client frame whose feature field holds a dense tensor
        body = bytearray(frame[4:-4])
        body[1] = int(MessageKind.TASK_FEATURE)
        body[14] = int(FieldTag.Z_DDAGGER)
        body = bytes(body) + struct.pack('<BII', int(FieldTag.SPLIT_DEPTH), 4, 2)
        forged = struct.pack('<I', len(body)) + body + struct.pack('<I', zlib.crc32(body))
        report = audit_privacy(forged)
        self.assertFalse(report.ok)
        self.assertIn('non-quantized', report.violations[0])

    def test_scalar_tensor_frame_is_a_violation(self):
        frames = [codec.encode(m) for m in one_message_per_kind()] + [scalar_feature_pair_frame()]
        report = audit_privacy(b''.join(frames))
        self.assertEqual(report.frame_count, len(frames))
        self.assertEqual(len(report.violations), 1)
        self.assertIn('schema violation', report.violations[0])

    def test_corrupted_transcript(self):
        frame = bytearray(codec.encode(one_message_per_kind()[0]))
        frame[-1] ^= 0x01
        with self.assertRaises(DecodeError):
            audit_privacy(bytes(frame))


class TestCheckpoint(unittest.TestCase):
    def test_save_load(self):
        rng = np.random.default_rng(0)
        entities = [CheckpointEntity(0, CLIENT, sample_layers(rng)), CheckpointEntity(1, SERVER, sample_layers(rng))]
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = pathlib.Path(tmp_dir).joinpath('checkpoint.hsfl')
            save_checkpoint(path, entities)
            loaded = load_checkpoint(path)
        self.assertEqual([(e.entity_id, e.kind_name) for e in loaded], [(0, 'client'), (1, 'server')])
        for e, ref in zip(loaded, entities):
            for layer, ref_layer in zip(e.layers, ref.layers):
                self.assertIs(type(layer), type(ref_layer))
                self.assertEqual(layer.depth_index, ref_layer.depth_index)
                np.testing.assert_array_equal(layer.weights, ref_layer.weights.astype(np.float32))
                np.testing.assert_array_equal(layer.bias, ref_layer.bias.astype(np.float32))

    def test_bad_magic(self):
        buf = checkpoint_bytes([CheckpointEntity(0, CLIENT, sample_layers(np.random.default_rng(0)))])
        with self.assertRaises(CheckpointError):
            parse_checkpoint(b'HSFX' + buf[4:])

    def test_truncated(self):
        buf = checkpoint_bytes([CheckpointEntity(0, CLIENT, sample_layers(np.random.default_rng(0)))])
        with self.assertRaises(CheckpointError) as ctx:
            parse_checkpoint(buf[:-3])
        self.assertIn('offset', str(ctx.exception))
        with self.assertRaises(CheckpointError):
            parse_checkpoint(buf + b'\x00')

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint('/nonexistent/checkpoint.hsfl')


if __name__ == "__main__":
    unittest.main()
