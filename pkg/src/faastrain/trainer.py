"""Worker-side training runtime pieces.

Data iteration (epoch permutation, modular partition, minibatch windows),
the SGD step pair (gradient computation / update application), and the
binary checkpoint codec that makes restarts exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, WorkerFault
from .models import Model, rows_from_bytes

class EpochComplete(Exception):
    """Signal: the epoch's sample windows are exhausted."""


@dataclass(frozen=True)
class BatchSchedule:
    """Global batch size per epoch: ((epoch_index, batch_size), ...).

    The entry with the largest epoch index <= e applies at epoch e.
    """

    entries: tuple[tuple[int, int], ...] = ((0, 32),)

    def __post_init__(self):
        if not self.entries:
            raise ValueError("batch schedule needs at least one entry")
        last = -1
        for epoch, batch in self.entries:
            if epoch <= last:
                raise ValueError("epoch indices must be strictly increasing")
            if batch < 1:
                raise ValueError("batch sizes must be >= 1")
            last = epoch
        if self.entries[0][0] != 0:
            raise ValueError("first schedule entry must cover epoch 0")

    def batch_for(self, epoch: int) -> int:
        batch = self.entries[0][1]
        for e, b in self.entries:
            if e <= epoch:
                batch = b
        return batch


def epoch_permutation(n_samples: int, epoch: int, seed: int) -> np.ndarray:
    """One global sample order per epoch, identical across workers."""
    rng = np.random.default_rng([seed, epoch, 0x5877FF1E])
    return rng.permutation(n_samples)


def partition_positions(n_samples: int, worker: int, n_workers: int) -> np.ndarray:
    """Permutation positions owned by a worker: p == worker (mod n_workers)."""
    if not 0 <= worker < n_workers:
        raise ValueError(f"worker {worker} outside gang of {n_workers}")
    return np.arange(worker, n_samples, n_workers)


def iteration_window(n_samples: int, batch: int, iteration: int) -> tuple[int, int]:
    """Global positions [lo, hi) consumed by one iteration; hi==lo past the epoch."""
    lo = min(iteration * batch, n_samples)
    return lo, min(lo + batch, n_samples)


def local_window_count(lo: int, hi: int, worker: int, n_workers: int) -> int:
    """How many positions in [lo, hi) fall to this worker (ceil-with-remainder)."""
    if hi <= lo:
        return 0
    first = lo + (worker - lo) % n_workers
    if first >= hi:
        return 0
    return (hi - 1 - first) // n_workers + 1


def iterations_per_epoch(n_samples: int, batch: int) -> int:
    return -(-n_samples // batch)


@dataclass
class PartitionCursor:
    """A worker's view of its epoch slice plus the consumption cursor.

    `X`/`y` rows are ordered by the worker's permutation positions, so a
    minibatch for any global window is a contiguous slice and the cursor is
    simply the number of rows consumed so far.
    """

    worker: int
    n_workers: int
    n_samples: int
    X: np.ndarray
    y: np.ndarray
    cursor: int = 0

    @property
    def size(self) -> int:
        return self.X.shape[0]

    def next_minibatch(self, batch: int, iteration: int) -> tuple[np.ndarray, np.ndarray]:
        """Rows for this worker's share of the iteration's global window.

        The slice may be empty when the window is short; the cursor still
        tracks exact consumption so restarts replay identically.
        """
        lo, hi = iteration_window(self.n_samples, batch, iteration)
        if lo >= self.n_samples:
            raise EpochComplete(f"epoch exhausted at iteration {iteration}")
        count = local_window_count(lo, hi, self.worker, self.n_workers)
        if self.cursor + count > self.size:
            raise WorkerFault(
                f"worker {self.worker} cursor overrun: {self.cursor}+{count}>{self.size}"
            )
        Xb = self.X[self.cursor:self.cursor + count]
        yb = self.y[self.cursor:self.cursor + count]
        self.cursor += count
        return Xb, yb


def load_partition(worker: int, n_workers: int, epoch: int, seed: int,
                   chunks: list[bytes], n_samples: int, n_features: int,
                   n_outputs: int, rows_per_chunk: int) -> PartitionCursor:
    """Assemble a worker's epoch slice from downloaded dataset chunks."""
    if n_samples:
        xs, ys = [], []
        for c, blob in enumerate(chunks):
            lo = c * rows_per_chunk
            rows = min(rows_per_chunk, n_samples - lo)
            Xc, yc = rows_from_bytes(blob, rows, n_features, n_outputs)
            xs.append(Xc)
            ys.append(yc)
        X = np.concatenate(xs)
        y = np.concatenate(ys)
    else:
        X = np.zeros((0, n_features))
        y = np.zeros((0, n_outputs))
    perm = epoch_permutation(n_samples, epoch, seed)
    mine = perm[partition_positions(n_samples, worker, n_workers)]
    return PartitionCursor(worker, n_workers, n_samples, X[mine], y[mine])


def train_step(model: Model, Xb: np.ndarray, yb: np.ndarray) -> tuple[float, np.ndarray]:
    """Forward + backward over one minibatch; returns (loss, mean gradient)."""
    return model.loss_and_grad(Xb, yb)


def apply_update(model: Model, global_grad: np.ndarray, learning_rate: float) -> None:
    """In-place SGD step with the globally reconstructed gradient."""
    global_grad = np.asarray(global_grad, dtype=np.float64)
    if global_grad.shape != (model.param_count,):
        raise WorkerFault(
            f"gradient length {global_grad.shape} != param count {model.param_count}"
        )
    model.params -= learning_rate * global_grad


# ---------------------------------------------------------------------------
# Checkpoint codec
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SMLTCKPT"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<8sIqqqqBQ")  # magic, version, epoch, iteration,
#                                           cursor, batch, flag, param count
_CKPT_RNG_LEN = struct.Struct("<I")


@dataclass
class Checkpoint:
    epoch: int
    iteration: int
    data_cursor: int
    parameters: np.ndarray
    batch_size: int
    success_flag: bool
    rng_state: bytes = b""


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    params = np.ascontiguousarray(ckpt.parameters, dtype="<f8")
    head = _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, ckpt.epoch, ckpt.iteration,
                           ckpt.data_cursor, ckpt.batch_size,
                           1 if ckpt.success_flag else 0, params.size)
    return head + params.tobytes() + _CKPT_RNG_LEN.pack(len(ckpt.rng_state)) + ckpt.rng_state


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _CKPT_HEAD.size:
        raise CheckpointError(f"checkpoint truncated: {len(blob)} bytes")
    magic, version, epoch, iteration, cursor, batch, flag, count = _CKPT_HEAD.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = _CKPT_HEAD.size
    if len(blob) < offset + 8 * count + _CKPT_RNG_LEN.size:
        raise CheckpointError("checkpoint parameter block truncated")
    params = np.frombuffer(blob, dtype="<f8", offset=offset, count=count).astype(np.float64)
    offset += 8 * count
    (rng_len,) = _CKPT_RNG_LEN.unpack_from(blob, offset)
    offset += _CKPT_RNG_LEN.size
    if len(blob) != offset + rng_len:
        raise CheckpointError("checkpoint rng block length mismatch")
    rng_state = blob[offset:offset + rng_len]
    return Checkpoint(epoch, iteration, cursor, params, batch, bool(flag), rng_state)
