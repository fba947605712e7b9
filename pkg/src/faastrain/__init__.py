"""Simulated serverless ML training framework.

A deterministic FaaS platform simulator, hybrid object/parameter storage,
hierarchical sharded gradient synchronization, a GP/EI deployment optimizer
for deadline- and budget-constrained training, and a fault-tolerant task
scheduler that adapts worker count and memory to training dynamics.
"""

from .errors import (
    CheckpointError,
    FaasTrainError,
    GPFitError,
    InfeasibleGoalError,
    InvalidConfigError,
    InvalidPlanError,
    InvocationError,
    JobSpecError,
    RestartStormError,
    StoreKeyError,
    SyncFault,
    WorkerFault,
)
from .models import DatasetConfig, Model, ModelConfig, make_dataset
from .optimizer import (
    DeploymentConfig,
    Observation,
    SearchLimits,
    SearchSpace,
    UserGoal,
    expected_improvement,
    gp_fit,
    propose_next,
    search,
)
from .platform import (
    FunctionSpec,
    InvocationRecord,
    PlatformParams,
    SimPlatform,
    billed_cost,
    compute_speed,
)
from .scheduler import (
    JobRunner,
    JobSpec,
    RunLedger,
    detect_change,
    job_from_dict,
    load_job_spec,
    run_job,
    upload_artifacts,
)
from .storage import HybridStorage, KeyValueStore, StoreParams
from .sync import (
    ShardPlan,
    SyncTiming,
    centralized_sync,
    hierarchical_sync,
    plan_shards,
)
from .trainer import BatchSchedule, Checkpoint, decode_checkpoint, encode_checkpoint

__version__ = "0.1.0"
