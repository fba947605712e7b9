"""Gradient synchronization through the parameter store.

Hierarchical path (per iteration): every worker splits its gradient into m
equal shards and uploads them; each worker then aggregates its assigned
shards from all n workers into a mean shard and re-uploads it; finally every
worker downloads all m mean shards and reconstructs the full vector.
A centralized baseline (upload full gradient, download everyone's) is kept
for comparison runs.

All functions are pure given a store handle.  The optional `charge` callback
receives each transfer's seconds before the write commits so a function
session can be billed (and killed) at the exact simulated moment.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidPlanError, StoreKeyError, SyncFault
from .storage import KeyValueStore

logger = logging.getLogger(__name__)

SHARD_MAGIC = b"SMLTSHRD"
_HEADER = struct.Struct("<8sII")  # magic, shard_index, payload_count


def encode_shard(index: int, values: np.ndarray) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f8")
    return _HEADER.pack(SHARD_MAGIC, index, values.size) + values.tobytes()


def decode_shard(blob: bytes) -> tuple[int, np.ndarray]:
    if len(blob) < _HEADER.size:
        raise SyncFault(f"shard blob truncated: {len(blob)} bytes")
    magic, index, count = _HEADER.unpack_from(blob)
    if magic != SHARD_MAGIC:
        raise SyncFault(f"bad shard magic {magic!r}")
    expected = _HEADER.size + 8 * count
    if len(blob) != expected:
        raise SyncFault(f"shard blob length {len(blob)} != {expected}")
    values = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size, count=count)
    return index, values.astype(np.float64)


@dataclass
class SyncTiming:
    """Per-step communication seconds for one worker and one iteration."""

    ul_shard: float = 0.0  # split + upload own shards
    dl_shard: float = 0.0  # download assigned shards from all workers
    ul_aggr: float = 0.0  # upload mean shards
    dl_grad: float = 0.0  # download all mean shards (or all gradients)
    ul_grad: float = 0.0  # centralized baseline only: upload full gradient

    def total(self) -> float:
        return self.ul_shard + self.dl_shard + self.ul_aggr + self.dl_grad + self.ul_grad

    def add(self, other: "SyncTiming") -> None:
        self.ul_shard += other.ul_shard
        self.dl_shard += other.dl_shard
        self.ul_aggr += other.ul_aggr
        self.dl_grad += other.dl_grad
        self.ul_grad += other.ul_grad


@dataclass(frozen=True)
class ShardPlan:
    n_workers: int
    m_shards: int
    grad_length: int
    shard_size: int
    pad_length: int
    boundaries: tuple[tuple[int, int], ...]  # over the padded domain
    assignment: tuple[int, ...]  # shard index -> aggregator worker

    @property
    def padded_length(self) -> int:
        return self.shard_size * self.m_shards

    def shards_of(self, worker: int) -> list[int]:
        return [j for j, w in enumerate(self.assignment) if w == worker]

    @property
    def idle_workers(self) -> tuple[int, ...]:
        assigned = set(self.assignment)
        return tuple(w for w in range(self.n_workers) if w not in assigned)


def plan_shards(grad_length: int, n_workers: int, m_shards: int) -> ShardPlan:
    """Equal-size shard layout with zero padding and round-robin aggregators.

    m < n is permitted but leaves n - m workers idle during aggregation;
    that configuration is flagged with a warning because the idle workers
    still bill wall time at the barrier.
    """
    if n_workers < 1 or m_shards < 1:
        raise InvalidPlanError(
            f"need at least one worker and one shard, got n={n_workers}, m={m_shards}"
        )
    if grad_length < 1:
        raise InvalidPlanError(f"gradient length must be >= 1, got {grad_length}")
    shard_size = -(-grad_length // m_shards)  # ceil
    pad = shard_size * m_shards - grad_length
    boundaries = tuple(
        (j * shard_size, (j + 1) * shard_size) for j in range(m_shards)
    )
    assignment = tuple(j % n_workers for j in range(m_shards))
    if m_shards < n_workers:
        logger.warning(
            "shard plan leaves %d of %d workers idle during aggregation",
            n_workers - m_shards, n_workers,
        )
    return ShardPlan(n_workers, m_shards, grad_length, shard_size, pad,
                     boundaries, assignment)


def shard_key(epoch: int, iteration: int, shard: int, worker: int, prefix: str = "") -> str:
    return f"{prefix}{epoch}/{iteration}/shard/{shard}/from/{worker}"


def aggr_key(epoch: int, iteration: int, shard: int, prefix: str = "") -> str:
    return f"{prefix}{epoch}/{iteration}/aggr/{shard}"


def grad_key(epoch: int, iteration: int, worker: int, prefix: str = "") -> str:
    return f"{prefix}{epoch}/{iteration}/grad/{worker}"


def _charged_put(store: KeyValueStore, key: str, blob: bytes, charge) -> float:
    seconds = store.transfer_time(len(blob))
    if charge is not None:
        charge(seconds)
    store.put(key, blob)
    return seconds


def _charged_get(store: KeyValueStore, key: str, charge) -> tuple[bytes, float]:
    try:
        blob, _ = store.get(key)
    except StoreKeyError as exc:
        raise SyncFault(str(exc)) from exc
    seconds = store.transfer_time(len(blob))
    if charge is not None:
        charge(seconds)
    return blob, seconds


def generate_and_upload_shards(worker_id: int, grad: np.ndarray, plan: ShardPlan,
                               store: KeyValueStore, epoch: int, iteration: int,
                               charge=None, prefix: str = "") -> float:
    """Split one worker's gradient into the planned shards and upload them.

    Returns the accumulated upload seconds (the UL-Shard step).
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (plan.grad_length,):
        raise SyncFault(
            f"gradient length {grad.shape} does not match plan ({plan.grad_length},)"
        )
    padded = grad
    if plan.pad_length:
        padded = np.concatenate([grad, np.zeros(plan.pad_length)])
    ul = 0.0
    for j, (lo, hi) in enumerate(plan.boundaries):
        blob = encode_shard(j, padded[lo:hi])
        ul += _charged_put(store, shard_key(epoch, iteration, j, worker_id, prefix),
                           blob, charge)
    return ul


def aggregate_assigned(worker_id: int, plan: ShardPlan, store: KeyValueStore,
                       epoch: int, iteration: int, charge=None,
                       prefix: str = "") -> tuple[float, float]:
    """Mean-reduce this worker's assigned shards across all n contributions.

    Requires the upload barrier to have passed: a missing contribution
    surfaces as SyncFault for the scheduler to treat as a worker fault.
    Returns (DL-Shard seconds, UL-aggr seconds).
    """
    dl = 0.0
    ul = 0.0
    for j in plan.shards_of(worker_id):
        stack = np.empty((plan.n_workers, plan.shard_size))
        for w in range(plan.n_workers):
            blob, seconds = _charged_get(
                store, shard_key(epoch, iteration, j, w, prefix), charge)
            dl += seconds
            index, values = decode_shard(blob)
            if index != j or values.size != plan.shard_size:
                raise SyncFault(f"shard {j} from worker {w} is malformed")
            stack[w] = values
        mean = stack.mean(axis=0)
        blob = encode_shard(j, mean)
        ul += _charged_put(store, aggr_key(epoch, iteration, j, prefix), blob, charge)
    return dl, ul


def reconstruct(plan: ShardPlan, store: KeyValueStore, epoch: int, iteration: int,
                charge=None, prefix: str = "") -> tuple[np.ndarray, float]:
    """Concatenate all mean shards in index order and strip the padding.

    Returns (global mean gradient, DL-grad seconds).
    """
    parts = []
    dl = 0.0
    for j in range(plan.m_shards):
        blob, seconds = _charged_get(store, aggr_key(epoch, iteration, j, prefix), charge)
        dl += seconds
        index, values = decode_shard(blob)
        if index != j or values.size != plan.shard_size:
            raise SyncFault(f"aggregated shard {j} is malformed")
        parts.append(values)
    full = np.concatenate(parts)
    return full[:plan.grad_length], dl


def hierarchical_sync(worker_grads: list[np.ndarray], store: KeyValueStore,
                      m_shards: int | None = None, epoch: int = 0,
                      iteration: int = 0, prefix: str = "") -> tuple[np.ndarray, list[SyncTiming]]:
    """Run the full shard/aggregate/reconstruct pipeline for a worker gang.

    Convenience driver used by tests and the synchronization experiments;
    the training scheduler invokes the step functions directly so it can
    charge each worker's session.  Returns the reconstructed mean and one
    SyncTiming per worker.
    """
    n = len(worker_grads)
    if n < 1:
        raise InvalidPlanError("need at least one worker gradient")
    length = len(worker_grads[0])
    plan = plan_shards(length, n, n if m_shards is None else m_shards)
    timings = [SyncTiming() for _ in range(n)]
    for w, grad in enumerate(worker_grads):
        timings[w].ul_shard = generate_and_upload_shards(
            w, grad, plan, store, epoch, iteration, prefix=prefix)
    for w in range(n):
        timings[w].dl_shard, timings[w].ul_aggr = aggregate_assigned(
            w, plan, store, epoch, iteration, prefix=prefix)
    result = None
    for w in range(n):
        vec, dl = reconstruct(plan, store, epoch, iteration, prefix=prefix)
        timings[w].dl_grad = dl
        result = vec
    return result, timings


def centralized_upload(worker_id: int, grad: np.ndarray, store: KeyValueStore,
                       epoch: int, iteration: int, charge=None,
                       prefix: str = "") -> float:
    blob = encode_shard(worker_id, np.asarray(grad, dtype=np.float64))
    return _charged_put(store, grad_key(epoch, iteration, worker_id, prefix), blob, charge)


def centralized_download_mean(n_workers: int, store: KeyValueStore, epoch: int,
                              iteration: int, charge=None,
                              prefix: str = "") -> tuple[np.ndarray, float]:
    dl = 0.0
    stack = None
    for w in range(n_workers):
        blob, seconds = _charged_get(store, grad_key(epoch, iteration, w, prefix), charge)
        dl += seconds
        _, values = decode_shard(blob)
        if stack is None:
            stack = np.empty((n_workers, values.size))
        stack[w] = values
    return stack.mean(axis=0), dl


def centralized_sync(worker_grads: list[np.ndarray], store: KeyValueStore,
                     epoch: int = 0, iteration: int = 0,
                     prefix: str = "") -> tuple[np.ndarray, list[SyncTiming]]:
    """Parameter-server baseline: all-to-store upload, store-to-all download.

    Every worker downloads all n gradients and averages locally, so the
    per-worker download grows linearly in the gang size.
    """
    n = len(worker_grads)
    if n < 1:
        raise InvalidPlanError("need at least one worker gradient")
    timings = [SyncTiming() for _ in range(n)]
    for w, grad in enumerate(worker_grads):
        timings[w].ul_grad = centralized_upload(w, grad, store, epoch, iteration,
                                                prefix=prefix)
    result = None
    for w in range(n):
        result, dl = centralized_download_mean(n, store, epoch, iteration, prefix=prefix)
        timings[w].dl_grad = dl
    return result, timings
