"""
Label-privacy audit of a recorded transcript, performed on raw frames (schema bypasses are detected too).
"""

from collections import Counter
from typing import List, Dict, Union, Sequence

from protocol import codec
from protocol.messages import MessageKind, FieldTag, UPSTREAM_KINDS, WireMessage
from utils.exception import DecodeError


# Client->server kinds which carry features: these must be quantized
_QUANTIZED_FEATURE_TAGS = {FieldTag.Z_DAGGER, FieldTag.Z_DDAGGER, FieldTag.FEATURE}
# Everything a client is allowed to send
_UPSTREAM_ALLOWED_TAGS = {MessageKind.FEATURE_PAIR: {FieldTag.Z_DAGGER, FieldTag.EXIT_DEPTH, FieldTag.INDICATOR},
                          MessageKind.TASK_FEATURE: {FieldTag.Z_DDAGGER, FieldTag.SPLIT_DEPTH},
                          MessageKind.UPSTREAM_GRAD: {FieldTag.GRADIENT},
                          MessageKind.MODEL_UPLOAD: {FieldTag.LAYER},
                          MessageKind.INFERENCE_FEATURE: {FieldTag.FEATURE, FieldTag.SPLIT_DEPTH}}


class PrivacyReport:
    def __init__(self):
        self.kind_counts: Dict[str, int] = dict()
        self.frame_count = 0
        self.byte_count = 0
        self.violations: List[str] = list()

    @property
    def ok(self) -> bool:
        return len(self.violations) == 0

    def __str__(self):
        lines = ["frames = {}".format(self.frame_count), "bytes = {}".format(self.byte_count)]
        lines += ["count.{} = {}".format(k, v) for k, v in sorted(self.kind_counts.items())]
        lines += ["violations = {}".format(len(self.violations))]
        lines += ["violation = {}".format(v) for v in self.violations]
        return "\n".join(lines)


def audit_privacy(transcript: Union[bytes, Sequence[WireMessage]]) -> PrivacyReport:
    """
    Scans a full transcript (raw bytes, or messages which are encoded first).
    Reports per-kind frame counts, and violations: label fields, unknown kinds or fields, client-to-server
    fields outside of features/indicators/depths/upstream gradients/model uploads, or non-quantized features.
    Raises DecodeError if the transcript cannot be split into frames.
    """
    if not isinstance(transcript, (bytes, bytearray)):
        transcript = b''.join(codec.encode(m) for m in transcript)
    report, counts = PrivacyReport(), Counter()
    for frame in codec.iter_raw_frames(transcript):
        report.frame_count += 1
        report.byte_count += frame.size
        where = "frame @{} (round {}, step {}, client {})".format(frame.offset, frame.round_index, frame.step,
                                                                 frame.client)
        try:
            kind = MessageKind(frame.kind)
        except ValueError:
            counts['UNKNOWN'] += 1
            report.violations.append("{}: unknown message kind {}".format(where, frame.kind))
            continue
        counts[kind.name] += 1
        for field in frame.fields:
            if field.tag == FieldTag.LABELS:
                report.violations.append("{}: label field in a {} frame".format(where, kind.name))
            elif kind in UPSTREAM_KINDS and field.tag not in _UPSTREAM_ALLOWED_TAGS[kind]:
                report.violations.append("{}: field {} not allowed in a client {} frame"
                                         .format(where, field.tag, kind.name))
            elif kind in UPSTREAM_KINDS and field.tag in _QUANTIZED_FEATURE_TAGS \
                    and field.content[:1] != b'Q':
                report.violations.append("{}: non-quantized feature in a {} frame".format(where, kind.name))
        if report.violations and report.violations[-1].startswith(where):
            continue
        try:  # Full schema check
            codec.message_from_raw(frame)
        except DecodeError as e:
            report.violations.append("{}: schema violation: {}".format(where, e.reason))
    report.kind_counts = dict(counts)
    return report
