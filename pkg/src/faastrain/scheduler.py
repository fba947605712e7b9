"""End client: artifact upload, resource allocation, and task scheduling.

The scheduler owns the training loop.  Worker gangs run bulk-synchronous
iterations against the simulated platform; every cross-worker byte moves
through the hybrid storage.  The scheduler supervises each slot: it restarts
failed or duration-capped invocations from the last checkpoint, voluntarily
recycles slots approaching the duration limit, pauses for re-optimization
when the observed batch size or model size drifts from the profiled
baseline, and stops at the deadline/budget boundary when the projection says
the goal is at risk.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InfeasibleGoalError,
    JobSpecError,
    RestartStormError,
    StoreKeyError,
    SyncFault,
    WorkerFault,
)
from .models import (
    LINEAR_REGRESSION,
    MLP,
    DatasetConfig,
    Model,
    ModelConfig,
    dataset_to_bytes,
    hidden_for_param_count,
    make_dataset,
)
from .optimizer import (
    GOAL_BUDGET,
    GOAL_DEADLINE,
    GOAL_FASTEST,
    DeploymentConfig,
    Observation,
    SearchLimits,
    SearchSpace,
    UserGoal,
    encode_objective,
    search,
)
from .platform import (
    OUTCOME_COMPLETED,
    OUTCOME_DURATION_EXCEEDED,
    OUTCOME_FAILED,
    DurationExceeded,
    FunctionSession,
    FunctionSpec,
    InjectedFailure,
    PlatformParams,
    SimPlatform,
    billed_cost,
    timed_get,
    timed_put,
)
from .storage import (
    OBJECT_STORE_DEFAULTS,
    PARAM_STORE_DEFAULTS,
    HybridStorage,
    KeyValueStore,
    StoreParams,
)
from .sync import (
    SyncTiming,
    aggregate_assigned,
    centralized_download_mean,
    centralized_upload,
    generate_and_upload_shards,
    plan_shards,
    reconstruct,
)
from .trainer import (
    BatchSchedule,
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    iteration_window,
    iterations_per_epoch,
    load_partition,
    local_window_count,
    train_step,
)

DATASET_CHUNK_BYTES = 250_000_000  # platform guidance: chunks up to 250 MB
STOP_SAFETY_FACTOR = 2.5  # boundary-stop margin, in units of one iteration

SYNC_HIERARCHICAL = "hierarchical"
SYNC_CENTRALIZED = "centralized"

STOP_COMPLETED = "completed"
STOP_DEADLINE = "deadline-boundary"
STOP_BUDGET = "budget-boundary"

EVENT_REOPT = "reoptimize"
EVENT_CHANGE = "change-detected"
EVENT_RESTART = "restart"
EVENT_FAILURE = "worker-failure"
EVENT_RECYCLE = "duration-guard-exit"
EVENT_STOP = "stop"
EVENT_CONFIG = "config-applied"
EVENT_MODEL = "model-rebuilt"
EVENT_INFEASIBLE_REOPT = "reoptimize-no-feasible"


# ---------------------------------------------------------------------------
# Job specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerSettings:
    limits: SearchLimits = field(default_factory=SearchLimits)
    space: SearchSpace = field(default_factory=lambda: SearchSpace(
        (1, 2, 4, 8, 16, 32), tuple(range(1024, 10241, 1024))))
    probe_iterations: int = 3


@dataclass(frozen=True)
class JobSpec:
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    batch_schedule: BatchSchedule = field(default_factory=BatchSchedule)
    model_size_schedule: tuple[tuple[int, int], ...] = ()  # (epoch, param_count)
    goal: UserGoal = field(default_factory=UserGoal)
    epochs: int = 1
    learning_rate: float = 0.05
    seed: int = 0
    platform: PlatformParams = field(default_factory=PlatformParams)
    object_store: StoreParams = OBJECT_STORE_DEFAULTS
    param_store: StoreParams = PARAM_STORE_DEFAULTS
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    sync_mode: str = SYNC_HIERARCHICAL
    adapt: bool = True
    fixed_config: DeploymentConfig | None = None  # bypass the optimizer
    # workload timing model: reference-speed seconds per (sample x parameter)
    # of forward+backward work, and per float of aggregation arithmetic
    compute_s_per_sample_param: float = 1e-6
    aggregate_s_per_float: float = 2e-9
    checkpoint_guard_factor: float = 1.5
    restart_storm_limit: int = 5
    fault_injections: tuple[tuple[int, int, int], ...] = ()  # (worker, epoch, iter)
    chunk_bytes: int = DATASET_CHUNK_BYTES

    def __post_init__(self):
        if self.epochs < 1:
            raise JobSpecError("epochs must be >= 1")
        if self.sync_mode not in (SYNC_HIERARCHICAL, SYNC_CENTRALIZED):
            raise JobSpecError(f"unknown sync mode {self.sync_mode!r}")
        if self.learning_rate <= 0:
            raise JobSpecError("learning_rate must be > 0")
        if self.chunk_bytes < 8:
            raise JobSpecError("chunk_bytes too small for a single value")
        last = -1
        for epoch, count in self.model_size_schedule:
            if epoch <= last or count < 1:
                raise JobSpecError("model size schedule must be strictly increasing")
            last = epoch
        if self.model_size_schedule and self.model.kind != MLP:
            raise JobSpecError("model size schedule requires the mlp model")


def model_config_for_epoch(job: JobSpec, epoch: int) -> ModelConfig:
    """Apply the model-size schedule: latest entry at or before this epoch."""
    target = None
    for e, count in job.model_size_schedule:
        if e <= epoch:
            target = count
    if target is None:
        return job.model
    hidden = hidden_for_param_count(job.model.n_features, job.model.n_outputs, target)
    return ModelConfig(MLP, job.model.n_features, hidden, job.model.n_outputs)


def total_planned_iterations(job: JobSpec, from_epoch: int = 0,
                             from_iteration: int = 0) -> int:
    total = 0
    for epoch in range(from_epoch, job.epochs):
        iters = iterations_per_epoch(job.dataset.n_samples,
                                     job.batch_schedule.batch_for(epoch))
        total += iters - (from_iteration if epoch == from_epoch else 0)
    return max(total, 1)


def job_from_dict(raw: dict) -> JobSpec:
    """Build a JobSpec from parsed JSON with field-level diagnostics."""
    try:
        m = raw.get("model", {})
        model = ModelConfig(kind=m.get("kind", LINEAR_REGRESSION),
                            n_features=m.get("n_features", 8),
                            hidden=m.get("hidden", 16),
                            n_outputs=m.get("n_outputs", 1))
        d = raw.get("dataset", {})
        dataset = DatasetConfig(n_samples=d.get("n_samples", 1024),
                                n_features=model.n_features,
                                n_outputs=model.n_outputs,
                                noise_std=d.get("noise_std", 0.0))
        schedule = BatchSchedule(tuple(
            (int(e), int(b)) for e, b in raw.get("batch_schedule", [[0, 32]])))
        size_schedule = tuple(
            (int(e), int(p)) for e, p in raw.get("model_size_schedule", []))
        g = raw.get("goal", {"mode": GOAL_FASTEST})
        goal = UserGoal(mode=g.get("mode", GOAL_FASTEST),
                        t_max=g.get("t_max"), s_max=g.get("s_max"))
        p = raw.get("platform", {})
        platform = PlatformParams(
            max_duration=p.get("max_duration", 900.0),
            cold_start=p.get("cold_start", 4.0),
            invocation_delay=p.get("invocation_delay", 0.5),
            price_per_gb_second=p.get("price_per_gb_second", 1.6667e-5),
            price_per_invocation=p.get("price_per_invocation", 0.0),
            reference_memory=p.get("reference_memory", 3072),
            failure_rate=p.get("failure_rate", 0.0),
            rng_seed=p.get("rng_seed", raw.get("seed", 0)))

        def store(cfg, defaults):
            if not cfg:
                return defaults
            return StoreParams(cfg.get("base_latency", defaults.base_latency),
                               cfg.get("bandwidth", defaults.bandwidth),
                               cfg.get("standing_cost_per_s",
                                       defaults.standing_cost_per_s))

        o = raw.get("optimizer", {})
        space_cfg = o.get("space", {})
        defaults = OptimizerSettings()
        if "workers" in space_cfg or "memories" in space_cfg:
            space = SearchSpace(
                tuple(int(w) for w in space_cfg.get("workers", defaults.space.workers)),
                tuple(int(v) for v in space_cfg.get("memories", defaults.space.memories)))
        else:
            space = defaults.space
        settings = OptimizerSettings(
            limits=SearchLimits(k_init=o.get("k_init", 5), k_max=o.get("k_max", 30),
                                ei_tolerance=o.get("ei_tolerance", 0.01)),
            space=space,
            probe_iterations=o.get("probe_iterations", 3))
        fixed = raw.get("fixed_config")
        return JobSpec(
            model=model, dataset=dataset, batch_schedule=schedule,
            model_size_schedule=size_schedule, goal=goal,
            epochs=raw.get("epochs", 1),
            learning_rate=raw.get("learning_rate", 0.05),
            seed=raw.get("seed", 0), platform=platform,
            object_store=store(raw.get("object_store"), OBJECT_STORE_DEFAULTS),
            param_store=store(raw.get("param_store"), PARAM_STORE_DEFAULTS),
            optimizer=settings,
            sync_mode=raw.get("sync_mode", SYNC_HIERARCHICAL),
            adapt=raw.get("adapt", True),
            fixed_config=(DeploymentConfig(fixed["workers"], fixed["memory"])
                          if fixed else None),
            compute_s_per_sample_param=raw.get("compute_s_per_sample_param", 1e-6),
            aggregate_s_per_float=raw.get("aggregate_s_per_float", 2e-9),
            checkpoint_guard_factor=raw.get("checkpoint_guard_factor", 1.5),
            restart_storm_limit=raw.get("restart_storm_limit", 5),
            fault_injections=tuple(tuple(int(v) for v in f)
                                   for f in raw.get("fault_injections", [])),
            chunk_bytes=raw.get("chunk_bytes", DATASET_CHUNK_BYTES))
    except JobSpecError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise JobSpecError(f"invalid job spec: {exc}") from exc


def load_job_spec(path: str) -> JobSpec:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise JobSpecError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise JobSpecError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise JobSpecError(f"{path}: top level must be a JSON object")
    return job_from_dict(raw)


# ---------------------------------------------------------------------------
# Reports, events, ledger
# ---------------------------------------------------------------------------


@dataclass
class WorkerReport:
    worker_id: int
    epoch: int
    iteration: int
    success_flag: bool
    iter_time: float
    sync_timing: SyncTiming
    observed_batch_size: int
    observed_param_count: int


@dataclass(frozen=True)
class ProfiledBaseline:
    batch_size: int
    param_count: int


@dataclass
class ChangeEvent:
    epoch: int
    iteration: int
    old_batch: int
    new_batch: int
    old_param_count: int
    new_param_count: int

    @property
    def kinds(self) -> str:
        parts = []
        if self.new_batch != self.old_batch:
            parts.append("batch")
        if self.new_param_count != self.old_param_count:
            parts.append("model-size")
        return "+".join(parts)


def detect_change(reports: list[WorkerReport],
                  baseline: ProfiledBaseline) -> ChangeEvent | None:
    """Fire when a successful report shows a batch or model size drift."""
    for r in reports:
        if not r.success_flag:
            continue
        if (r.observed_batch_size != baseline.batch_size
                or r.observed_param_count != baseline.param_count):
            return ChangeEvent(r.epoch, r.iteration, baseline.batch_size,
                               r.observed_batch_size, baseline.param_count,
                               r.observed_param_count)
    return None


@dataclass
class IterationRow:
    epoch: int
    iteration: int
    t_start: float
    t_end: float
    batch_size: int
    param_count: int
    workers: int
    memory: int
    iter_cost: float
    loss: float
    timing: SyncTiming
    restarts: int

    @property
    def iter_time(self) -> float:
        return self.t_end - self.t_start


@dataclass
class EventRow:
    time: float
    kind: str
    detail: str


@dataclass
class RunLedger:
    rows: list[IterationRow] = field(default_factory=list)
    events: list[EventRow] = field(default_factory=list)
    observations: list[Observation] = field(default_factory=list)
    wall_time: float = 0.0
    total_cost: float = 0.0
    training_time: float = 0.0
    training_cost: float = 0.0
    profiling_time: float = 0.0
    profiling_cost: float = 0.0
    standing_cost: float = 0.0
    sync_active_seconds: float = 0.0
    final_loss: float = math.nan
    restarts: int = 0
    reoptimizations: int = 0
    epochs_completed: int = 0
    iterations_completed: int = 0
    stop_reason: str = STOP_COMPLETED
    stopped_early: bool = False

    def event(self, time: float, kind: str, detail: str = "") -> None:
        self.events.append(EventRow(time, kind, detail))

    def summary(self) -> dict:
        return {
            "wall_time_s": self.wall_time,
            "total_cost_usd": self.total_cost,
            "training_time_s": self.training_time,
            "training_cost_usd": self.training_cost,
            "profiling_time_s": self.profiling_time,
            "profiling_cost_usd": self.profiling_cost,
            "standing_cost_usd": self.standing_cost,
            "final_loss": self.final_loss,
            "restarts": self.restarts,
            "reoptimizations": self.reoptimizations,
            "epochs_completed": self.epochs_completed,
            "iterations_completed": self.iterations_completed,
            "stop_reason": self.stop_reason,
            "stopped_early": self.stopped_early,
        }

    def write_iterations_csv(self, path: str) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "iteration", "clock_start_s", "clock_end_s",
                        "batch_size", "param_count", "workers", "memory_mb",
                        "iter_time_s", "iter_cost_usd", "loss", "ul_shard_s",
                        "dl_shard_s", "ul_aggr_s", "dl_grad_s", "ul_grad_s",
                        "restarts"])
            for r in self.rows:
                w.writerow([r.epoch, r.iteration, repr(r.t_start), repr(r.t_end),
                            r.batch_size, r.param_count, r.workers, r.memory,
                            repr(r.iter_time), repr(r.iter_cost), repr(r.loss),
                            repr(r.timing.ul_shard), repr(r.timing.dl_shard),
                            repr(r.timing.ul_aggr), repr(r.timing.dl_grad),
                            repr(r.timing.ul_grad), r.restarts])

    def write_events_csv(self, path: str) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "event", "detail"])
            for e in self.events:
                w.writerow([repr(e.time), e.kind, e.detail])


# ---------------------------------------------------------------------------
# Artifact manager
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArtifactManifest:
    n_samples: int
    n_features: int
    n_outputs: int
    rows_per_chunk: int
    chunk_keys: tuple[str, ...]
    code_key: str

    @property
    def n_chunks(self) -> int:
        return len(self.chunk_keys)


def upload_artifacts(job: JobSpec, object_store: KeyValueStore,
                     X: np.ndarray, y: np.ndarray) -> ArtifactManifest:
    """Chunk the dataset into the object store and write the manifest.

    Chunks are row-aligned and capped at job.chunk_bytes of serialized rows;
    re-uploading writes identical keys and bytes (idempotent).
    """
    n, d = X.shape
    k = y.shape[1]
    row_bytes = (d + k) * 8
    rows_per_chunk = max(1, job.chunk_bytes // row_bytes)
    keys = []
    for c in range(-(-n // rows_per_chunk)):
        lo = c * rows_per_chunk
        hi = min(lo + rows_per_chunk, n)
        key = f"data/chunk/{c}"
        object_store.put(key, dataset_to_bytes(X[lo:hi], y[lo:hi]))
        keys.append(key)
    code_key = "code/trainer"
    object_store.put(code_key, json.dumps({
        "model": job.model.kind, "n_features": d, "n_outputs": k,
        "learning_rate": job.learning_rate}, sort_keys=True).encode())
    object_store.put("data/manifest", json.dumps({
        "n_samples": n, "n_features": d, "n_outputs": k,
        "rows_per_chunk": rows_per_chunk, "chunks": keys},
        sort_keys=True).encode())
    return ArtifactManifest(n, d, k, rows_per_chunk, tuple(keys), code_key)


# ---------------------------------------------------------------------------
# Worker gang
# ---------------------------------------------------------------------------


@dataclass
class _Slot:
    worker_id: int
    session: FunctionSession | None = None
    model: Model | None = None
    partition: object = None  # PartitionCursor
    last_ckpt_key: str = ""
    consecutive_failures: int = 0
    restarts: int = 0


class Gang:
    """n worker slots running bulk-synchronous training iterations.

    All synchronization flows through the stores and all time through the
    slots' function sessions, so an iteration's wall time is the barrier
    maximum over the gang.  Any slot death (injected failure, random platform
    failure, hard duration cap) is recovered by restarting the slot from its
    last checkpoint and replaying the current iteration's phases; uploads are
    idempotent overwrites, so the replay is exact.
    """

    def __init__(self, platform: SimPlatform, storage: HybridStorage, job: JobSpec,
                 config: DeploymentConfig, manifest: ArtifactManifest,
                 model_config: ModelConfig, ledger: RunLedger,
                 slot_prefix: str = "worker", key_prefix: str = ""):
        self.platform = platform
        self.storage = storage
        self.job = job
        self.config = config
        self.manifest = manifest
        self.model_config = model_config
        self.ledger = ledger
        self.slot_prefix = slot_prefix
        self.key_prefix = key_prefix
        self.slots = [_Slot(w) for w in range(config.workers)]
        self.epoch = 0
        self.iteration = 0
        self.boundary_key = ""
        self.injected = set(job.fault_injections)
        self.fired_injections: set[tuple[int, int, int]] = set()
        self.last_iter_span = 0.0

    # -- lifecycle ----------------------------------------------------------

    def write_boundary_checkpoint(self, model: Model, epoch: int) -> None:
        """Authoritative state for slots without a checkpoint of their own."""
        ckpt = Checkpoint(epoch, 0, 0, model.params,
                          self.job.batch_schedule.batch_for(epoch), True)
        self.boundary_key = f"{self.key_prefix}ckpt/boundary/{epoch}"
        self.storage.object_store.put(self.boundary_key, encode_checkpoint(ckpt))

    def _spec(self) -> FunctionSpec:
        return FunctionSpec(memory=self.config.memory, handler_id="trainer")

    def _slot_name(self, worker_id: int) -> str:
        return f"{self.slot_prefix}/{worker_id}"

    def _boot_slot(self, slot: _Slot, at_time: float) -> None:
        """One invocation attempt: boot, restore checkpoint, fetch partition."""
        session = self.platform.begin(self._spec(), self._slot_name(slot.worker_id),
                                      start=at_time)
        slot.session = session
        session.boot()
        key = slot.last_ckpt_key or self.boundary_key
        blob, _ = timed_get(session, self.storage.object_store, key)
        ckpt = decode_checkpoint(blob)
        slot.model = Model(self.model_config, ckpt.parameters)
        self._fetch_partition(slot, ckpt.epoch, ckpt.data_cursor)

    def _fetch_partition(self, slot: _Slot, epoch: int, cursor: int) -> None:
        chunks = []
        for key in self.manifest.chunk_keys:
            try:
                blob, _ = timed_get(slot.session, self.storage.object_store, key)
            except StoreKeyError as exc:
                raise WorkerFault(f"worker {slot.worker_id}: {exc}") from exc
            chunks.append(blob)
        slot.partition = load_partition(
            slot.worker_id, self.config.workers, epoch, self.job.seed, chunks,
            self.manifest.n_samples, self.manifest.n_features,
            self.manifest.n_outputs, self.manifest.rows_per_chunk)
        slot.partition.cursor = cursor

    def _count_restart(self, slot: _Slot, outcome: str) -> float:
        """Close a dead session and account for the restart; returns its time."""
        at = slot.session.t_now
        self.platform.finish(slot.session, outcome)
        slot.session = None
        slot.consecutive_failures += 1
        slot.restarts += 1
        self.ledger.restarts += 1
        if slot.consecutive_failures > self.job.restart_storm_limit:
            raise RestartStormError(
                f"slot {slot.worker_id} failed {slot.consecutive_failures} "
                f"consecutive times at epoch {self.epoch} iter {self.iteration}")
        kind = EVENT_FAILURE if outcome == OUTCOME_FAILED else EVENT_RESTART
        self.ledger.event(at, kind, f"worker={slot.worker_id} outcome={outcome} "
                                    f"epoch={self.epoch} iter={self.iteration}")
        return at

    def _restart_slot(self, slot: _Slot, outcome: str) -> None:
        """Close the dead session and re-invoke until the restore sticks.

        Deterministic faults (a missing dataset chunk, say) recur on every
        retry; the storm guard inside _count_restart bounds the loop.
        """
        at = self._count_restart(slot, outcome)
        while True:
            try:
                self._boot_slot(slot, at)
                return
            except InjectedFailure:
                at = self._count_restart(slot, OUTCOME_FAILED)
            except DurationExceeded:
                at = self._count_restart(slot, OUTCOME_DURATION_EXCEEDED)
            except (WorkerFault, SyncFault):
                at = self._count_restart(slot, OUTCOME_FAILED)

    def _boot_with_recovery(self, slot: _Slot, at_time: float) -> None:
        """First invocation attempt for a slot, falling back to restarts."""
        try:
            self._boot_slot(slot, at_time)
            slot.consecutive_failures = 0
        except InjectedFailure:
            self._restart_slot(slot, OUTCOME_FAILED)
        except DurationExceeded:
            self._restart_slot(slot, OUTCOME_DURATION_EXCEEDED)
        except (WorkerFault, SyncFault):
            self._restart_slot(slot, OUTCOME_FAILED)

    def _attempt(self, slot: _Slot, work, replay=None) -> None:
        """Run work(slot); on death, restart the slot and run the replay chain.

        The replay chain must rebuild everything the current iteration did for
        this slot (a restart rewinds it to the last checkpoint).
        """
        replay_steps = replay if replay is not None else [work]
        first = True
        while True:
            try:
                if first:
                    work(slot)
                else:
                    for step in replay_steps:
                        step(slot)
                slot.consecutive_failures = 0
                return
            except InjectedFailure:
                self._restart_slot(slot, OUTCOME_FAILED)
            except DurationExceeded:
                self._restart_slot(slot, OUTCOME_DURATION_EXCEEDED)
            except (WorkerFault, SyncFault):
                self._restart_slot(slot, OUTCOME_FAILED)
            first = False

    def _barrier(self, replay=None) -> float:
        """Advance every slot to the gang maximum, recovering any deaths."""
        while True:
            target = max(s.session.t_now for s in self.slots)
            clean = True
            for slot in self.slots:
                if slot.session.t_now < target:
                    def wait(s: _Slot, tt=target) -> None:
                        s.session.advance_to(tt)
                    self._attempt(slot, wait,
                                  replay=(replay or []) + [wait] if replay else None)
                    if slot.session.t_now > target:
                        clean = False
            if clean and len({s.session.t_now for s in self.slots}) == 1:
                return target

    def start(self, epoch: int, model: Model) -> None:
        """Write the boundary state and invoke the whole gang concurrently."""
        self.epoch = epoch
        self.iteration = 0
        self.write_boundary_checkpoint(model, epoch)
        for slot in self.slots:
            slot.last_ckpt_key = ""
        t0 = self.platform.clock
        for slot in self.slots:
            self._boot_with_recovery(slot, t0)
        self.platform.clock = self._barrier()

    def begin_epoch(self, epoch: int, model: Model) -> None:
        """Epoch boundary on live sessions: new boundary state, refetch data."""
        self.epoch = epoch
        self.iteration = 0
        self.write_boundary_checkpoint(model, epoch)
        for slot in self.slots:
            slot.last_ckpt_key = ""

        def refetch(slot: _Slot) -> None:
            self._fetch_partition(slot, epoch, 0)

        for slot in self.slots:
            # after a mid-refetch restart the boot already fetched this
            # epoch's partition; the replay refetch is an idempotent no-op
            self._attempt(slot, refetch, replay=[refetch])
        self.platform.clock = self._barrier()

    def close(self, outcome: str = OUTCOME_COMPLETED) -> None:
        for slot in self.slots:
            if slot.session is not None and not slot.session.closed:
                self.platform.finish(slot.session, outcome)
                slot.session = None

    def model_snapshot(self) -> Model:
        return self.slots[0].model.clone()

    def accrued_cost(self) -> float:
        """Cost of open sessions not yet billed into the platform ledger."""
        total = 0.0
        for slot in self.slots:
            if slot.session is not None and not slot.session.closed:
                total += billed_cost(slot.session.memory, slot.session.elapsed,
                                     self.job.platform)
        return total

    # -- one BSP iteration ----------------------------------------------------

    def _raw_compute_seconds(self, count: int) -> float:
        return (count * self.model_config.param_count
                * self.job.compute_s_per_sample_param)

    def run_iteration(self, epoch: int, iteration: int, batch: int,
                      learning_rate: float) -> tuple[IterationRow, list[WorkerReport]]:
        self.epoch = epoch
        self.iteration = iteration
        job = self.job
        n = self.config.workers
        pstore = self.storage.param_store
        t0 = max(s.session.t_now for s in self.slots)
        restarts_before = self.ledger.restarts
        records_before = len(self.platform.records)
        lo, hi = iteration_window(self.manifest.n_samples, batch, iteration)
        window = hi - lo
        plan = plan_shards(self.model_config.param_count, n, n)
        timings = [SyncTiming() for _ in range(n)]
        losses = [0.0] * n
        counts = [0] * n

        def phase_a(slot: _Slot) -> None:
            s = slot.session
            w = slot.worker_id
            key = (w, epoch, iteration)
            if key in self.injected and key not in self.fired_injections:
                # deterministic single-fault injection: die after the backward
                # pass but before publishing any shard
                count = local_window_count(lo, hi, w, n)
                s.advance(self._raw_compute_seconds(count) / s.speed / 2.0)
                self.fired_injections.add(key)
                raise InjectedFailure(s.instance_id)
            Xb, yb = slot.partition.next_minibatch(batch, iteration)
            count = Xb.shape[0]
            s.compute(self._raw_compute_seconds(count))
            if count:
                loss, grad = train_step(slot.model, Xb, yb)
                # pre-scale by the window share so the plain shard mean equals
                # the global window-mean gradient even for ragged splits
                grad = grad * (n * count / window)
            else:
                loss, grad = 0.0, np.zeros(self.model_config.param_count)
            losses[w] = loss
            counts[w] = count
            timings[w] = SyncTiming()
            if job.sync_mode == SYNC_HIERARCHICAL:
                timings[w].ul_shard = generate_and_upload_shards(
                    w, grad, plan, pstore, epoch, iteration,
                    charge=s.advance, prefix=self.key_prefix)
            else:
                timings[w].ul_grad = centralized_upload(
                    w, grad, pstore, epoch, iteration,
                    charge=s.advance, prefix=self.key_prefix)

        def phase_b(slot: _Slot) -> None:
            s = slot.session
            w = slot.worker_id
            dl, ul = aggregate_assigned(w, plan, pstore, epoch, iteration,
                                        charge=s.advance, prefix=self.key_prefix)
            s.compute(len(plan.shards_of(w)) * plan.shard_size * n
                      * job.aggregate_s_per_float)
            timings[w].dl_shard = dl
            timings[w].ul_aggr = ul

        def phase_c(slot: _Slot) -> None:
            s = slot.session
            w = slot.worker_id
            if job.sync_mode == SYNC_HIERARCHICAL:
                vec, dl = reconstruct(plan, pstore, epoch, iteration,
                                      charge=s.advance, prefix=self.key_prefix)
            else:
                vec, dl = centralized_download_mean(n, pstore, epoch, iteration,
                                                    charge=s.advance,
                                                    prefix=self.key_prefix)
            timings[w].dl_grad = dl
            s.compute(self.model_config.param_count * job.aggregate_s_per_float)
            slot.model.params -= learning_rate * vec
            ckpt = Checkpoint(epoch, iteration + 1, slot.partition.cursor,
                              slot.model.params, batch, True)
            key = f"{self.key_prefix}ckpt/{w}/{epoch}/{iteration + 1}"
            timed_put(s, self.storage.object_store, key, encode_checkpoint(ckpt))
            slot.last_ckpt_key = key

        for slot in self.slots:
            self._attempt(slot, phase_a, replay=[phase_a])
        if job.sync_mode == SYNC_HIERARCHICAL:
            self._barrier(replay=[phase_a])
            for slot in self.slots:
                self._attempt(slot, phase_b, replay=[phase_a, phase_b])
            self._barrier(replay=[phase_a, phase_b])
        else:
            self._barrier(replay=[phase_a])
        for slot in self.slots:
            if job.sync_mode == SYNC_HIERARCHICAL:
                self._attempt(slot, phase_c, replay=[phase_a, phase_b, phase_c])
            else:
                self._attempt(slot, phase_c, replay=[phase_a, phase_c])
        t_end = self._barrier(replay=([phase_a, phase_b, phase_c]
                                      if job.sync_mode == SYNC_HIERARCHICAL
                                      else [phase_a, phase_c]))

        self.last_iter_span = t_end - t0
        self.platform.clock = t_end

        # duration guard: voluntarily checkpoint-and-exit slots whose
        # remaining budget cannot safely cover another iteration
        guard = job.checkpoint_guard_factor * self.last_iter_span
        recycled = False
        for slot in self.slots:
            if slot.session.remaining() < guard:
                self.platform.finish(slot.session, OUTCOME_COMPLETED)
                slot.session = None
                self.ledger.event(t_end, EVENT_RECYCLE,
                                  f"worker={slot.worker_id} epoch={epoch} iter={iteration}")
                recycled = True
                self._boot_with_recovery(slot, t_end)
        if recycled:
            t_end = self._barrier()
            self.platform.clock = t_end

        # marginal cost of the iteration: session time consumed in the window
        # plus invocations closed inside it
        rate = (self.config.memory / 1024.0) * job.platform.price_per_gb_second
        iter_cost = 0.0
        for slot in self.slots:
            iter_cost += rate * (slot.session.t_now - max(t0, slot.session.t_start))
        for rec in self.platform.records[records_before:]:
            iter_cost += (rate * (rec.end_time - max(t0, rec.start_time))
                          + job.platform.price_per_invocation)

        loss = (sum(l * c for l, c in zip(losses, counts)) / window) if window else 0.0
        mean_timing = SyncTiming(
            ul_shard=sum(t.ul_shard for t in timings) / n,
            dl_shard=sum(t.dl_shard for t in timings) / n,
            ul_aggr=sum(t.ul_aggr for t in timings) / n,
            dl_grad=sum(t.dl_grad for t in timings) / n,
            ul_grad=sum(t.ul_grad for t in timings) / n)
        row = IterationRow(epoch, iteration, t0, t_end, batch,
                           self.model_config.param_count, n, self.config.memory,
                           iter_cost, loss, mean_timing,
                           self.ledger.restarts - restarts_before)
        reports = [WorkerReport(w, epoch, iteration, True, t_end - t0, timings[w],
                                batch, self.model_config.param_count)
                   for w in range(n)]
        return row, reports


# ---------------------------------------------------------------------------
# Job runner
# ---------------------------------------------------------------------------


class JobRunner:
    """Drives one job end to end; the pieces are separable for tests."""

    def __init__(self, job: JobSpec):
        self.job = job
        self.platform = SimPlatform(job.platform)
        self.storage = HybridStorage(
            KeyValueStore(job.object_store, "object-store"),
            KeyValueStore(job.param_store, "param-store"))
        self.ledger = RunLedger()
        self.manifest: ArtifactManifest | None = None
        self.final_model: Model | None = None
        self.last_objective = None  # ObjectiveModel of the latest search
        self._probe_seq = 0

    # -- profiling ----------------------------------------------------------

    def _profile(self, config: DeploymentConfig, model: Model,
                 model_config: ModelConfig, epoch: int,
                 batch: int) -> tuple[Observation, float, float]:
        """Run a few throwaway iterations under `config` and measure them.

        Probe state is cloned (fresh key prefix and slots); its time and cost
        are charged to the platform like any other invocation.
        """
        self._probe_seq += 1
        prefix = f"probe/{self._probe_seq}/"
        records_before = len(self.platform.records)
        clock_before = self.platform.clock
        gang = Gang(self.platform, self.storage, self.job, config, self.manifest,
                    model_config, self.ledger, slot_prefix=f"probe{self._probe_seq}",
                    key_prefix=prefix)
        gang.start(epoch, model.clone())
        spans = []
        iters = min(self.job.optimizer.probe_iterations,
                    iterations_per_epoch(self.job.dataset.n_samples, batch))
        for t in range(iters):
            row, _ = gang.run_iteration(epoch, t, batch, self.job.learning_rate)
            spans.append(row.iter_time)
            self.ledger.sync_active_seconds += row.iter_time
        gang.close()
        probe_cost = sum(r.billed_cost
                         for r in self.platform.records[records_before:])
        probe_time = self.platform.clock - clock_before
        median_span = float(np.median(spans))
        rate = (config.memory / 1024.0) * self.job.platform.price_per_gb_second
        iter_cost = config.workers * rate * median_span
        obs = Observation(config, iter_time=median_span, iter_cost=iter_cost,
                          batch_size=batch, param_count=model_config.param_count)
        return obs, probe_time, probe_cost

    def _optimize(self, model: Model, model_config: ModelConfig, epoch: int,
                  iteration: int, batch: int,
                  incumbent: DeploymentConfig | None) -> tuple[DeploymentConfig, bool]:
        """Run the profile-and-propose search for the current phase."""
        job = self.job
        remaining = total_planned_iterations(job, epoch, iteration)
        objective = encode_objective(job.goal, remaining,
                                     elapsed=self.platform.clock,
                                     spent=self.platform.total_billed())
        self.last_objective = objective
        reusable = [o for o in self.ledger.observations
                    if o.batch_size == batch
                    and o.param_count == model_config.param_count]

        def profiler(config: DeploymentConfig):
            return self._profile(config, model, model_config, epoch, batch)

        t_before = self.platform.clock
        result = search(profiler, objective, job.optimizer.space,
                        job.optimizer.limits, seed=job.seed + 1000 * (self.ledger.reoptimizations + 1),
                        initial_observations=reusable, incumbent=incumbent)
        self.ledger.profiling_time += result.profiling_time
        self.ledger.profiling_cost += result.profiling_cost
        for obs in result.observations:
            if all(obs is not kept for kept in self.ledger.observations):
                self.ledger.observations.append(obs)
        self.ledger.event(t_before, EVENT_REOPT,
                          f"epoch={epoch} probes={result.probes} "
                          f"best_workers={result.best_config.workers} "
                          f"best_memory={result.best_config.memory} "
                          f"feasible={int(result.feasible_found)} "
                          f"stop={result.stop_reason}")
        return result.best_config, result.feasible_found

    # -- goal accounting ------------------------------------------------------

    def _boundary_stop(self, est_iter_time: float, est_iter_cost: float,
                       accrued: float = 0.0) -> str | None:
        goal = self.job.goal
        if goal.mode == GOAL_DEADLINE:
            margin = STOP_SAFETY_FACTOR * est_iter_time
            if self.platform.clock + margin > goal.t_max:
                return STOP_DEADLINE
        elif goal.mode == GOAL_BUDGET:
            spent = self.platform.total_billed() + accrued + self._standing_cost()
            margin = STOP_SAFETY_FACTOR * est_iter_cost
            if spent + margin > goal.s_max:
                return STOP_BUDGET
        return None

    def _standing_cost(self) -> float:
        return (self.ledger.sync_active_seconds
                * self.job.param_store.standing_cost_per_s)

    # -- main loop ------------------------------------------------------------

    def run(self) -> RunLedger:
        job = self.job
        ledger = self.ledger
        X, y = make_dataset(job.dataset, job.seed, teacher_kind=job.model.kind,
                            teacher_hidden=job.model.hidden)
        self.manifest = upload_artifacts(job, self.storage.object_store, X, y)

        model_config = model_config_for_epoch(job, 0)
        model = Model.initialize(model_config, job.seed)
        batch = job.batch_schedule.batch_for(0)

        if job.fixed_config is not None:
            config = job.fixed_config
        else:
            config, feasible = self._optimize(model, model_config, 0, 0, batch,
                                              incumbent=None)
            ledger.reoptimizations += 1
            if job.goal.mode in (GOAL_DEADLINE, GOAL_BUDGET) and not feasible:
                limit = job.goal.t_max if job.goal.mode == GOAL_DEADLINE else job.goal.s_max
                raise InfeasibleGoalError(
                    f"no profiled configuration satisfies the {job.goal.mode} "
                    f"limit {limit}", observations=ledger.observations)
        baseline = ProfiledBaseline(batch, model_config.param_count)
        pending_config: DeploymentConfig | None = None

        gang = Gang(self.platform, self.storage, job, config, self.manifest,
                    model_config, ledger)
        gang.start(0, model)
        est_iter_time = 0.0
        est_iter_cost = 0.0
        stop_reason = None

        try:
            for epoch in range(job.epochs):
                new_model_config = model_config_for_epoch(job, epoch)
                rebuild = new_model_config != model_config
                if rebuild:
                    model_config = new_model_config
                    model = Model.initialize(model_config, job.seed + epoch)
                    ledger.event(self.platform.clock, EVENT_MODEL,
                                 f"epoch={epoch} param_count={model_config.param_count}")
                else:
                    model = gang.model_snapshot()
                if pending_config is not None and pending_config != config:
                    config = pending_config
                    ledger.event(self.platform.clock, EVENT_CONFIG,
                                 f"epoch={epoch} workers={config.workers} "
                                 f"memory={config.memory}")
                pending_config = None
                gang_shape_changed = (config.workers != gang.config.workers
                                      or config.memory != gang.config.memory
                                      or rebuild)
                if epoch > 0:
                    if gang_shape_changed or gang.slots[0].session is None:
                        gang.close()
                        gang = Gang(self.platform, self.storage, job, config,
                                    self.manifest, model_config, ledger)
                        gang.start(epoch, model)
                    else:
                        gang.begin_epoch(epoch, model)

                batch = job.batch_schedule.batch_for(epoch)
                iters = iterations_per_epoch(job.dataset.n_samples, batch)
                for t in range(iters):
                    if est_iter_time > 0:
                        stop_reason = self._boundary_stop(est_iter_time, est_iter_cost,
                                                          gang.accrued_cost())
                        if stop_reason:
                            ledger.event(self.platform.clock, EVENT_STOP,
                                         f"{stop_reason} epoch={epoch} iter={t}")
                            raise _StopAtBoundary(stop_reason)
                    row, reports = gang.run_iteration(epoch, t, batch,
                                                      job.learning_rate)
                    ledger.rows.append(row)
                    ledger.iterations_completed += 1
                    ledger.sync_active_seconds += row.iter_time
                    est_iter_time = row.iter_time
                    est_iter_cost = row.iter_cost

                    if job.adapt and job.fixed_config is None:
                        change = detect_change(reports, baseline)
                        if change is not None:
                            ledger.event(self.platform.clock, EVENT_CHANGE,
                                         f"epoch={epoch} iter={t} kinds={change.kinds} "
                                         f"batch={change.old_batch}->{change.new_batch} "
                                         f"params={change.old_param_count}->"
                                         f"{change.new_param_count}")
                            baseline = ProfiledBaseline(batch,
                                                        model_config.param_count)
                            # pause: release the gang, profile, resume
                            snapshot = gang.model_snapshot()
                            gang.close()
                            new_config, feasible = self._optimize(
                                snapshot, model_config, epoch, t + 1, batch,
                                incumbent=config)
                            ledger.reoptimizations += 1
                            if not feasible and job.goal.mode != GOAL_FASTEST:
                                ledger.event(self.platform.clock,
                                             EVENT_INFEASIBLE_REOPT,
                                             f"epoch={epoch} keeping incumbent")
                                new_config = config
                            pending_config = new_config
                            # resume the rest of this epoch on the old config
                            for slot in gang.slots:
                                self._resume_slot(gang, slot)
                            self.platform.clock = gang._barrier()
                ledger.epochs_completed += 1
        except _StopAtBoundary as stop:
            ledger.stop_reason = stop.reason
            ledger.stopped_early = True
        finally:
            gang.close()

        final_model = gang.model_snapshot()
        ledger.final_loss = final_model.loss(X, y) if job.dataset.n_samples else math.nan
        ledger.wall_time = self.platform.clock
        ledger.standing_cost = self._standing_cost()
        ledger.total_cost = self.platform.total_billed() + ledger.standing_cost
        ledger.training_time = ledger.wall_time - ledger.profiling_time
        ledger.training_cost = ledger.total_cost - ledger.profiling_cost
        self.final_model = final_model
        return ledger

    def _resume_slot(self, gang: Gang, slot) -> None:
        gang._boot_with_recovery(slot, self.platform.clock)


class _StopAtBoundary(Exception):
    def __init__(self, reason: str):
        self.reason = reason


def run_job(job: JobSpec) -> RunLedger:
    """Execute a job end to end and return its ledger."""
    return JobRunner(job).run()
