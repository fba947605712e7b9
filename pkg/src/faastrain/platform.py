"""Deterministic simulated FaaS platform.

A single clock, function sessions with memory-proportional compute speed,
cold-start and invocation delays, a hard per-invocation duration cap, seeded
failure injection, and a pay-as-you-go billing ledger.  Everything is
deterministic given PlatformParams (including rng_seed) and the workload.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidConfigError, InvocationError

MIN_MEMORY_MB = 128
MAX_MEMORY_MB = 10240

OUTCOME_COMPLETED = "completed"
OUTCOME_DURATION_EXCEEDED = "duration_exceeded"
OUTCOME_FAILED = "failed"


class DurationExceeded(Exception):
    """Control-flow signal: the session crossed its hard duration cap."""


class InjectedFailure(Exception):
    """Control-flow signal: the session hit its drawn failure point."""


@dataclass(frozen=True)
class PlatformParams:
    max_duration: float = 900.0  # hard per-invocation cap, seconds
    cold_start: float = 4.0  # framework/model init on a fresh instance
    invocation_delay: float = 0.5  # platform-side dispatch latency
    price_per_gb_second: float = 1.6667e-5
    price_per_invocation: float = 0.0
    reference_memory: int = 3072  # MB at which compute speed is 1.0
    failure_rate: float = 0.0  # probability an invocation is doomed
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_duration <= 0:
            raise ValueError("max_duration must be > 0")
        if self.cold_start < 0 or self.invocation_delay < 0:
            raise ValueError("delays must be >= 0")
        if self.price_per_gb_second < 0 or self.price_per_invocation < 0:
            raise ValueError("prices must be >= 0")
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValueError("failure_rate must be in [0, 1]")
        if self.reference_memory < MIN_MEMORY_MB:
            raise ValueError("reference_memory below platform minimum")


@dataclass(frozen=True)
class FunctionSpec:
    memory: int  # MB
    handler_id: str = "worker"
    payload: bytes = b""


@dataclass(frozen=True)
class InvocationRecord:
    instance_id: str
    start_time: float
    end_time: float
    outcome: str
    billed_cost: float
    cold: bool = False  # paid the cold start (not part of the CSV schema)

    @property
    def duration(self) -> float:
        return self.end_time - self.start_time


def compute_speed(memory: int, params: PlatformParams) -> float:
    """Compute-speed factor, linear in memory through the reference point."""
    if not MIN_MEMORY_MB <= memory <= MAX_MEMORY_MB:
        raise InvalidConfigError(
            f"memory {memory} MB outside [{MIN_MEMORY_MB}, {MAX_MEMORY_MB}]"
        )
    return memory / params.reference_memory


def billed_cost(memory: int, duration: float, params: PlatformParams) -> float:
    """GB-second metering plus a flat per-invocation fee."""
    if duration < 0:
        raise ValueError("duration must be >= 0")
    return (memory / 1024.0) * duration * params.price_per_gb_second + params.price_per_invocation


class FunctionSession:
    """One running invocation.

    Time is charged through advance()/compute().  Crossing the duration cap
    raises DurationExceeded with the session pinned exactly at the cap;
    crossing a drawn failure point raises InjectedFailure.  The platform
    closes the session into an InvocationRecord via finish().
    """

    def __init__(self, platform: "SimPlatform", instance_id: str, slot: str,
                 memory: int, t_start: float, cold: bool, fail_elapsed: float | None):
        self.platform = platform
        self.instance_id = instance_id
        self.slot = slot
        self.memory = memory
        self.speed = compute_speed(memory, platform.params)
        self.t_start = t_start
        self.t_now = t_start
        self.cold = cold
        self.deadline = t_start + platform.params.max_duration
        # Doomed sessions die when elapsed time crosses this point (or at
        # completion, whichever comes first).
        self.fail_at = None if fail_elapsed is None else t_start + fail_elapsed
        self.closed = False

    @property
    def elapsed(self) -> float:
        return self.t_now - self.t_start

    def remaining(self) -> float:
        return self.deadline - self.t_now

    @property
    def doomed(self) -> bool:
        return self.fail_at is not None

    def boot(self) -> None:
        """Charge dispatch delay plus cold start (skipped on a warm instance)."""
        self.advance(self.platform.params.invocation_delay)
        if self.cold:
            self.advance(self.platform.params.cold_start)

    def advance(self, seconds: float) -> None:
        """Charge wall-clock seconds (storage transfers, barrier waits)."""
        if self.closed:
            raise InvocationError(f"session {self.instance_id} already closed")
        if seconds < 0:
            raise ValueError("cannot advance by negative time")
        target = self.t_now + seconds
        if self.fail_at is not None and target >= self.fail_at:
            self.t_now = self.fail_at
            raise InjectedFailure(self.instance_id)
        if target > self.deadline:
            self.t_now = self.deadline
            raise DurationExceeded(self.instance_id)
        self.t_now = target

    def compute(self, work_seconds: float) -> None:
        """Charge compute work, scaled by the memory-proportional speed."""
        self.advance(work_seconds / self.speed)

    def advance_to(self, t: float) -> None:
        """Wait at a barrier until global time t (exact assignment)."""
        if t <= self.t_now:
            return
        if self.closed:
            raise InvocationError(f"session {self.instance_id} already closed")
        if self.fail_at is not None and t >= self.fail_at:
            self.t_now = self.fail_at
            raise InjectedFailure(self.instance_id)
        if t > self.deadline:
            self.t_now = self.deadline
            raise DurationExceeded(self.instance_id)
        self.t_now = t


class SimPlatform:
    """Owner of the simulation clock and the billing ledger."""

    def __init__(self, params: PlatformParams | None = None):
        self.params = params or PlatformParams()
        self.clock = 0.0
        self.records: list[InvocationRecord] = []
        self._rng = np.random.default_rng(self.params.rng_seed)
        self._warm: set[str] = set()
        self._invocation_counts: dict[str, int] = {}

    def total_billed(self) -> float:
        return sum(r.billed_cost for r in self.records)

    def invocations_of(self, slot_prefix: str) -> list[InvocationRecord]:
        return [r for r in self.records if r.instance_id.startswith(slot_prefix + "#")]

    def begin(self, spec: FunctionSpec, slot: str, start: float | None = None) -> FunctionSession:
        """Open a session for one invocation of a logical instance slot.

        Two RNG draws happen per invocation (doom decision + failure point)
        regardless of failure_rate, so the random stream only depends on the
        invocation sequence.
        """
        compute_speed(spec.memory, self.params)  # validate memory range
        t_start = self.clock if start is None else start
        seq = self._invocation_counts.get(slot, 0)
        self._invocation_counts[slot] = seq + 1
        doom_draw = self._rng.random()
        point_draw = self._rng.random()
        fail_elapsed = None
        if doom_draw < self.params.failure_rate:
            fail_elapsed = point_draw * self.params.max_duration
        cold = slot not in self._warm
        return FunctionSession(
            self, f"{slot}#{seq}", slot, spec.memory, t_start, cold, fail_elapsed
        )

    def finish(self, session: FunctionSession, outcome: str) -> InvocationRecord:
        """Close a session: bill it, update warmth, advance the clock.

        A doomed session that reaches a voluntary exit still fails: the drawn
        failure is per invocation, and the platform kills the instance before
        its output is published.
        """
        if session.closed:
            raise InvocationError(f"session {session.instance_id} already closed")
        session.closed = True
        if outcome == OUTCOME_COMPLETED and session.doomed:
            outcome = OUTCOME_FAILED
        cost = billed_cost(session.memory, session.elapsed, self.params)
        record = InvocationRecord(
            session.instance_id, session.t_start, session.t_now, outcome, cost,
            cold=session.cold,
        )
        self.records.append(record)
        if outcome == OUTCOME_COMPLETED:
            self._warm.add(session.slot)
        else:
            # Abnormal exits tear the instance down; the next start is cold.
            self._warm.discard(session.slot)
        self.clock = max(self.clock, session.t_now)
        return record

    def invoke(self, spec: FunctionSpec,
               handler: Callable[[FunctionSession], object],
               slot: str | None = None,
               start: float | None = None) -> tuple[InvocationRecord, object]:
        """Run one handler to completion (or cap/failure) as a single event.

        Returns (record, output); output is None unless the invocation
        completed, mirroring the success-flag-suppression contract for
        failed invocations.
        """
        if handler is None or not callable(handler):
            raise InvocationError(f"unknown handler for {spec.handler_id!r}")
        if slot is None:
            slot = f"fn/{spec.handler_id}"
        session = self.begin(spec, slot, start)
        output = None
        try:
            session.boot()
            output = handler(session)
        except DurationExceeded:
            return self.finish(session, OUTCOME_DURATION_EXCEEDED), None
        except InjectedFailure:
            return self.finish(session, OUTCOME_FAILED), None
        record = self.finish(session, OUTCOME_COMPLETED)
        if record.outcome != OUTCOME_COMPLETED:
            output = None
        return record, output

    def write_ledger_csv(self, path: str) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["instance_id", "start", "end", "outcome", "cost"])
            for r in self.records:
                writer.writerow([r.instance_id, repr(r.start_time), repr(r.end_time),
                                 r.outcome, repr(r.billed_cost)])


def timed_put(session: FunctionSession, store, key: str, data: bytes) -> float:
    """Charge a put's transfer time before committing it.

    If the session dies mid-transfer the write never lands, matching the
    statelessness contract (partial state survives only via completed writes).
    """
    seconds = store.transfer_time(len(data))
    session.advance(seconds)
    store.put(key, data)
    return seconds


def timed_get(session: FunctionSession, store, key: str) -> tuple[bytes, float]:
    data, _ = store.get(key)
    seconds = store.transfer_time(len(data))
    session.advance(seconds)
    return data, seconds
