"""
Byte and message accounting of all frames exchanged during a run.
"""

from typing import Dict, Tuple, Optional, List

import pandas as pd

from protocol.messages import WireMessage, MessageKind, UPSTREAM_KINDS


class TrafficLedger:
    def __init__(self):
        """ Per-(client, round, kind) counters of messages and encoded bytes. Counters only increase. """
        self._counters: Dict[Tuple[int, int, MessageKind], List[int]] = dict()

    def record(self, msg: WireMessage, frame_size: int):
        if frame_size < 0:
            raise ValueError("Frame size must be >= 0")
        key = (msg.client, msg.round_index, msg.kind)
        counter = self._counters.setdefault(key, [0, 0])
        counter[0] += 1
        counter[1] += int(frame_size)

    def merge(self, other: 'TrafficLedger'):
        """ Adds the counters of another ledger (e.g. filled by a parallel client task) to this one. """
        for key, (n_messages, n_bytes) in sorted(other._counters.items()):
            counter = self._counters.setdefault(key, [0, 0])
            counter[0] += n_messages
            counter[1] += n_bytes

    def total_bytes(self, round_index: Optional[int] = None, upstream: Optional[bool] = None,
                    client: Optional[int] = None) -> int:
        return sum(c[1] for k, c in self._counters.items() if self._match(k, round_index, upstream, client))

    def total_messages(self, round_index: Optional[int] = None, upstream: Optional[bool] = None,
                       client: Optional[int] = None) -> int:
        return sum(c[0] for k, c in self._counters.items() if self._match(k, round_index, upstream, client))

    @staticmethod
    def _match(key, round_index, upstream, client):
        return (round_index is None or key[1] == round_index) and (client is None or key[0] == client) \
               and (upstream is None or (key[2] in UPSTREAM_KINDS) == upstream)

    def to_dataframe(self) -> pd.DataFrame:
        rows = [{'client': k[0], 'round': k[1], 'kind': k[2].name, 'upstream': k[2] in UPSTREAM_KINDS,
                 'messages': c[0], 'bytes': c[1]}
                for k, c in sorted(self._counters.items())]
        return pd.DataFrame(rows, columns=['client', 'round', 'kind', 'upstream', 'messages', 'bytes'])

    def __len__(self):
        return len(self._counters)
