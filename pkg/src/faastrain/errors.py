"""Exception types shared across the package."""


class FaasTrainError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(FaasTrainError):
    """A parameter or deployment configuration violates its bounds."""


class InvocationError(FaasTrainError):
    """A function invocation could not be carried out (unknown handler, dead session)."""


class StoreKeyError(FaasTrainError, KeyError):
    """Requested key is absent from a store."""

    def __str__(self):  # KeyError quotes its arg; keep the plain message
        return Exception.__str__(self)


class SyncFault(FaasTrainError):
    """A synchronization step found a missing or malformed shard."""


class WorkerFault(FaasTrainError):
    """A worker produced an unusable result (non-finite loss, missing data chunk)."""


class CheckpointError(FaasTrainError):
    """Checkpoint blob failed validation on restore."""


class GPFitError(FaasTrainError):
    """Kernel matrix stayed singular after maximum jitter."""


class InvalidPlanError(FaasTrainError):
    """Shard plan parameters are unusable (zero workers or shards)."""


class RestartStormError(FaasTrainError):
    """One worker slot failed too many times in a row; the job is aborted."""


class InfeasibleGoalError(FaasTrainError):
    """No explored configuration satisfies the user's deadline/budget constraint."""

    def __init__(self, message, observations=None):
        super().__init__(message)
        self.observations = observations or []


class JobSpecError(FaasTrainError):
    """Job specification file failed to parse or validate."""
