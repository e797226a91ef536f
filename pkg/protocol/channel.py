"""
In-process channel between one client and the servers. Every payload is encoded, accounted in the ledger,
optionally recorded into a transcript, then decoded: the receiving side only ever sees the decoded copy.
"""

from typing import List, Optional

from protocol import codec
from protocol.ledger import TrafficLedger
from protocol.messages import Payload, WireMessage


class Channel:
    def __init__(self, client: int, round_index: int, ledger: Optional[TrafficLedger] = None,
                 record_transcript=False):
        """ One channel per (client, round) task. FIFO by construction: send(...) delivers synchronously. """
        self.client, self.round_index = client, round_index
        self.ledger = ledger if ledger is not None else TrafficLedger()
        self.record_transcript = record_transcript
        self.frames: List[bytes] = list()

    def send(self, payload: Payload, step: int = 0) -> Payload:
        msg = WireMessage(payload, self.round_index, step, self.client)
        frame = codec.encode(msg)
        self.ledger.record(msg, len(frame))
        if self.record_transcript:
            self.frames.append(frame)
        return codec.decode(frame).payload
