"""Hybrid storage tiers for the simulator.

Two instances of the same key-value store class play different roles: a bulk
object store for code, datasets and checkpoints, and a low-latency in-memory
parameter store for per-iteration gradient traffic.  Every operation reports
the simulated transfer time (affine in payload size) so callers can charge it
to their function session.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import StoreKeyError


@dataclass(frozen=True)
class StoreParams:
    """Latency/bandwidth cost model of one storage tier.

    standing_cost_per_s is an hourly-style meter for keeping the tier alive
    while gradient synchronization is active; it defaults to zero and is
    reported separately from invocation billing.
    """

    base_latency: float
    bandwidth: float
    standing_cost_per_s: float = 0.0

    def __post_init__(self):
        if self.base_latency < 0:
            raise ValueError(f"base_latency must be >= 0, got {self.base_latency}")
        if self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")
        if self.standing_cost_per_s < 0:
            raise ValueError("standing_cost_per_s must be >= 0")


# Bulk tier: high per-op latency, cheap sequential bandwidth.
OBJECT_STORE_DEFAULTS = StoreParams(base_latency=20e-3, bandwidth=100e6)
# In-memory tier: must be latency-dominant-free for small shard traffic so
# that sharded downloads beat whole-gradient downloads at large worker counts.
PARAM_STORE_DEFAULTS = StoreParams(base_latency=50e-6, bandwidth=1e9)


class TransferRecord(NamedTuple):
    op: str  # "put" | "get"
    key: str
    nbytes: int
    seconds: float


@dataclass
class Blob:
    key: str
    data: bytes

    @property
    def size(self) -> int:
        return len(self.data)


class KeyValueStore:
    """Flat key-value store with a simulated transfer-time model.

    Keys are plain strings; '/' is only a naming convention.  Overwrites
    replace atomically, reads see all prior writes (single simulated
    timeline), and capacity is unbounded.
    """

    def __init__(self, params: StoreParams, name: str = "store"):
        self.params = params
        self.name = name
        self._data: dict[str, bytes] = {}
        self.ledger: list[TransferRecord] = []

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def transfer_time(self, nbytes: int) -> float:
        return self.params.base_latency + nbytes / self.params.bandwidth

    def put(self, key: str, data: bytes) -> float:
        if not key:
            raise ValueError("key must be nonempty")
        data = bytes(data)
        self._data[key] = data
        seconds = self.transfer_time(len(data))
        self.ledger.append(TransferRecord("put", key, len(data), seconds))
        return seconds

    def get(self, key: str) -> tuple[bytes, float]:
        try:
            data = self._data[key]
        except KeyError:
            raise StoreKeyError(f"{self.name}: no such key {key!r}") from None
        seconds = self.transfer_time(len(data))
        self.ledger.append(TransferRecord("get", key, len(data), seconds))
        return data, seconds

    def list_keys(self, prefix: str = "") -> list[str]:
        return sorted(k for k in self._data if k.startswith(prefix))

    def delete(self, key: str) -> None:
        self._data.pop(key, None)

    def dump(self, directory: str) -> None:
        """Debug helper: write one file per key ('/' mapped to '__')."""
        os.makedirs(directory, exist_ok=True)
        for key in self.list_keys():
            path = os.path.join(directory, key.replace("/", "__"))
            with open(path, "wb") as fh:
                fh.write(self._data[key])


@dataclass
class HybridStorage:
    """The two tiers a job runs against."""

    object_store: KeyValueStore = field(
        default_factory=lambda: KeyValueStore(OBJECT_STORE_DEFAULTS, "object-store")
    )
    param_store: KeyValueStore = field(
        default_factory=lambda: KeyValueStore(PARAM_STORE_DEFAULTS, "param-store")
    )
