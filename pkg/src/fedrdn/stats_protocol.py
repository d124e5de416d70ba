"""One-shot statistics exchange run before the first communication round.

Clients upload a :class:`StatsMessage` (dataset-level channel mean/std plus
counts); the server validates the set and broadcasts a :class:`StatsRegistry`.
The message type has no field that could carry per-sample data.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .augmentation import ChannelStats, StatsRegistry, dataset_channel_stats
from .errors import MisuseError, ProtocolError

# Wire schema of a StatsMessage: field name -> kind. "f64[C]" fields are the
# only floating-point payload.
STATS_WIRE_SCHEMA = {
    "client_id": "u32",
    "sample_count": "u32",
    "C": "u32",
    "mean": "f64[C]",
    "std": "f64[C]",
}


@dataclass(frozen=True)
class StatsMessage:
    client_id: int
    stats: ChannelStats
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise MisuseError(f"client {self.client_id}: sample_count must be >= 1")

    def to_wire(self) -> dict:
        return {
            "client_id": int(self.client_id),
            "sample_count": int(self.sample_count),
            "C": self.stats.channels,
            "mean": [float(v) for v in self.stats.mean],
            "std": [float(v) for v in self.stats.std],
        }

    @classmethod
    def from_wire(cls, d: dict) -> StatsMessage:
        if set(d) != set(STATS_WIRE_SCHEMA):
            raise ProtocolError(f"stats message fields {sorted(d)} do not match schema {sorted(STATS_WIRE_SCHEMA)}")
        if len(d["mean"]) != d["C"] or len(d["std"]) != d["C"]:
            raise ProtocolError(f"stats message from client {d['client_id']}: C={d['C']} but "
                                f"{len(d['mean'])} means / {len(d['std'])} stds")
        return cls(int(d["client_id"]), ChannelStats(np.asarray(d["mean"]), np.asarray(d["std"])),
                   int(d["sample_count"]))

    def float_payload(self) -> int:
        """Number of f64 values on the wire."""
        return 2 * self.stats.channels


def client_stats_round(ds, pooled: bool = False) -> StatsMessage:
    """Client side: summarize the local training split."""
    if ds.n_k < 1:
        raise MisuseError(f"client {ds.client_id} has an empty training set")
    return StatsMessage(ds.client_id, dataset_channel_stats(ds, pooled=pooled), ds.n_k)


def server_collect_and_broadcast(messages: Iterable[StatsMessage], num_clients: int | None = None) -> StatsRegistry:
    """Server side: require exactly one message per client 0..K-1, order by id.

    ``K`` defaults to one more than the largest id received.
    """
    messages = list(messages)
    if not messages:
        raise ProtocolError("no statistics messages received")
    counts = Counter(m.client_id for m in messages)
    duplicates = sorted(k for k, n in counts.items() if n > 1)
    K = num_clients if num_clients is not None else max(counts) + 1
    expected = set(range(K))
    missing = sorted(expected - set(counts))
    unexpected = sorted(set(counts) - expected)
    if duplicates or missing or unexpected:
        parts = []
        if duplicates:
            parts.append(f"duplicate client ids {duplicates}")
        if missing:
            parts.append(f"missing client ids {missing}")
        if unexpected:
            parts.append(f"unexpected client ids {unexpected}")
        raise ProtocolError("; ".join(parts))
    by_id = {m.client_id: m for m in messages}
    return StatsRegistry(tuple(by_id[k].stats for k in range(K)))


def run_stats_round(federation, pooled: bool = False) -> tuple[StatsRegistry, list[StatsMessage]]:
    messages = [client_stats_round(c, pooled=pooled) for c in federation.clients]
    return server_collect_and_broadcast(messages, federation.K), messages
