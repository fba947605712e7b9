"""User-centric deployment optimizer.

Searches the two-dimensional space of (worker count, per-worker memory) with
Gaussian-process regression and an expected-improvement acquisition, under
one of three goal encodings: minimize cost under a training deadline,
minimize time under a monetary budget, or simply minimize time.

The incumbent is always the *lowest* objective value seen so far (this is a
minimization search throughout), improvement is measured downward from it,
and infeasible probes are folded in through a penalty large enough that any
feasible configuration dominates every infeasible one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import GPFitError, InvalidConfigError, WorkerFault
from .platform import MAX_MEMORY_MB, MIN_MEMORY_MB

GOAL_DEADLINE = "deadline"
GOAL_BUDGET = "budget"
GOAL_FASTEST = "fastest"

# Acquisition maximization: coarse memory lattice plus a seeded random cloud,
# since an exhaustive sweep of the 1 MB-grain memory axis buys nothing.
COARSE_MEMORY_LATTICE = (MIN_MEMORY_MB,) + tuple(range(256, MAX_MEMORY_MB + 1, 256))
N_RANDOM_CANDIDATES = 2048
EXHAUSTIVE_SPACE_LIMIT = 4096

LENGTH_SCALE_GRID = (0.05, 0.1, 0.2, 0.4, 0.8)
NOISE_VARIANCE = 1e-12  # observation noise std 1e-6 in standardized units
MAX_JITTER = 1e-6


@dataclass(frozen=True)
class DeploymentConfig:
    """Scale-out / scale-up decision: gang size and per-worker memory (MB)."""

    workers: int
    memory: int

    def __post_init__(self):
        if self.workers < 1:
            raise InvalidConfigError(f"workers must be >= 1, got {self.workers}")
        if not MIN_MEMORY_MB <= self.memory <= MAX_MEMORY_MB:
            raise InvalidConfigError(
                f"memory {self.memory} MB outside [{MIN_MEMORY_MB}, {MAX_MEMORY_MB}]"
            )


@dataclass
class Observation:
    """One profiled configuration: per-iteration wall time and cost."""

    config: DeploymentConfig
    iter_time: float
    iter_cost: float
    feasible: bool = True
    batch_size: int | None = None
    param_count: int | None = None

    def __post_init__(self):
        if self.iter_time <= 0:
            raise ValueError("iter_time must be > 0")
        if self.iter_cost < 0:
            raise ValueError("iter_cost must be >= 0")


@dataclass(frozen=True)
class UserGoal:
    mode: str = GOAL_FASTEST
    t_max: float | None = None  # deadline, seconds
    s_max: float | None = None  # budget, dollars

    def __post_init__(self):
        if self.mode not in (GOAL_DEADLINE, GOAL_BUDGET, GOAL_FASTEST):
            raise ValueError(f"unknown goal mode {self.mode!r}")
        if self.mode == GOAL_DEADLINE and (self.t_max is None or self.t_max <= 0):
            raise ValueError("deadline mode requires t_max > 0")
        if self.mode == GOAL_BUDGET and (self.s_max is None or self.s_max <= 0):
            raise ValueError("budget mode requires s_max > 0")


@dataclass(frozen=True)
class SearchSpace:
    """Explicit value grids for both dimensions."""

    workers: tuple[int, ...]
    memories: tuple[int, ...]

    def __post_init__(self):
        if not self.workers or not self.memories:
            raise InvalidConfigError("search space must be nonempty")
        for m in self.memories:
            if not MIN_MEMORY_MB <= m <= MAX_MEMORY_MB:
                raise InvalidConfigError(f"memory {m} outside platform range")
        for w in self.workers:
            if w < 1:
                raise InvalidConfigError("worker counts must be >= 1")

    @classmethod
    def from_ranges(cls, min_workers: int = 1, max_workers: int = 32,
                    min_memory: int = MIN_MEMORY_MB, max_memory: int = MAX_MEMORY_MB,
                    memory_step: int = 1) -> "SearchSpace":
        return cls(tuple(range(min_workers, max_workers + 1)),
                   tuple(range(min_memory, max_memory + 1, memory_step)))

    @property
    def size(self) -> int:
        return len(self.workers) * len(self.memories)

    def all_configs(self) -> list[DeploymentConfig]:
        return [DeploymentConfig(w, m)
                for w in sorted(self.workers) for m in sorted(self.memories)]


# ---------------------------------------------------------------------------
# Gaussian-process regression
# ---------------------------------------------------------------------------


def _normalize(space: SearchSpace, configs: list[DeploymentConfig]) -> np.ndarray:
    """Map configs into [0,1]^2 using the space's value ranges."""
    w_lo, w_hi = min(space.workers), max(space.workers)
    m_lo, m_hi = min(space.memories), max(space.memories)
    out = np.empty((len(configs), 2))
    for i, c in enumerate(configs):
        out[i, 0] = 0.5 if w_hi == w_lo else (c.workers - w_lo) / (w_hi - w_lo)
        out[i, 1] = 0.5 if m_hi == m_lo else (c.memory - m_lo) / (m_hi - m_lo)
    return out


def _sq_dists(A: np.ndarray, B: np.ndarray, length_scales: np.ndarray) -> np.ndarray:
    diff = A[:, None, :] / length_scales - B[None, :, :] / length_scales
    return np.sum(diff ** 2, axis=2)


class GPModel:
    """Squared-exponential GP posterior over the normalized config space.

    Targets are standardized internally; in the original scale the prior mean
    is the sample mean of the targets and the signal variance their sample
    variance, so a query far from all data reverts to (mean, std) of what has
    been observed.
    """

    def __init__(self, space: SearchSpace):
        self.space = space
        self.configs: list[DeploymentConfig] = []
        self.X = np.zeros((0, 2))
        self.y = np.zeros(0)
        self.prior_mean = 0.0
        self.y_scale = 1.0
        self.length_scales = np.array([0.2, 0.2])
        self.noise_variance = NOISE_VARIANCE
        self._alpha = None
        self._chol = None

    @property
    def signal_variance(self) -> float:
        return self.y_scale ** 2

    def _kernel(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return np.exp(-0.5 * _sq_dists(A, B, self.length_scales))

    def _factor(self, ls: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        """Cholesky of K + noise, with jitter escalation; returns (L, alpha, jitter)."""
        K = np.exp(-0.5 * _sq_dists(self.X, self.X, ls))
        z = (self.y - self.prior_mean) / self.y_scale
        jitter = self.noise_variance
        while jitter <= MAX_JITTER:
            try:
                L = np.linalg.cholesky(K + jitter * np.eye(len(K)))
                alpha = np.linalg.solve(L.T, np.linalg.solve(L, z))
                return L, alpha, jitter
            except np.linalg.LinAlgError:
                jitter *= 100.0
        raise GPFitError(
            f"kernel matrix singular after jitter {MAX_JITTER} ({len(K)} points)"
        )

    def _log_marginal(self, L: np.ndarray, alpha: np.ndarray) -> float:
        z = (self.y - self.prior_mean) / self.y_scale
        return float(-0.5 * z @ alpha - np.sum(np.log(np.diag(L)))
                     - 0.5 * len(z) * math.log(2.0 * math.pi))

    def fit(self, configs: list[DeploymentConfig], values: np.ndarray) -> "GPModel":
        values = np.asarray(values, dtype=np.float64)
        self.configs = list(configs)
        self.X = _normalize(self.space, self.configs)
        self.y = values
        if len(values) == 0:
            self.prior_mean = 0.0
            self.y_scale = 1.0
            self._alpha = None
            return self
        self.prior_mean = float(values.mean())
        std = float(values.std())
        # Signal variance tracks the observed variance; a constant surface
        # therefore carries (numerically) no posterior uncertainty and lets
        # the acquisition collapse immediately.
        self.y_scale = std if std > 0 else 1e-12
        best = None
        for lw in LENGTH_SCALE_GRID:
            for lm in LENGTH_SCALE_GRID:
                ls = np.array([lw, lm])
                self.length_scales = ls
                L, alpha, jitter = self._factor(ls)
                score = self._log_marginal(L, alpha)
                if best is None or score > best[0]:
                    best = (score, ls, L, alpha, jitter)
        _, self.length_scales, self._chol, self._alpha, self._jitter = best
        return self

    def predict(self, configs: list[DeploymentConfig]) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation at each query config."""
        Xq = _normalize(self.space, configs)
        if self._alpha is None:
            mu = np.full(len(configs), self.prior_mean)
            return mu, np.full(len(configs), self.y_scale)
        Kq = self._kernel(Xq, self.X)
        mu = self.prior_mean + self.y_scale * (Kq @ self._alpha)
        v = np.linalg.solve(self._chol, Kq.T)
        var = np.maximum(1.0 - np.sum(v ** 2, axis=0), 0.0)
        return mu, self.y_scale * np.sqrt(var)

    def predict_one(self, config: DeploymentConfig) -> tuple[float, float]:
        mu, sigma = self.predict([config])
        return float(mu[0]), float(sigma[0])


def gp_fit(observations: list[DeploymentConfig], values, space: SearchSpace) -> GPModel:
    """Fit hyperparameters by marginal likelihood over the length-scale grid."""
    return GPModel(space).fit(observations, values)


# ---------------------------------------------------------------------------
# Expected improvement
# ---------------------------------------------------------------------------


def _norm_cdf(z):
    return 0.5 * (1.0 + erf(np.asarray(z) / math.sqrt(2.0)))


def _norm_pdf(z):
    z = np.asarray(z)
    return np.exp(-0.5 * z ** 2) / math.sqrt(2.0 * math.pi)


def expected_improvement(y_best, mu, sigma):
    """EI for minimization: (y_best - mu) * Phi(g) + sigma * phi(g).

    g is the standardized improvement margin (y_best - mu) / sigma.  Returns
    0 where sigma == 0 (no posterior uncertainty means no expected gain).
    Accepts scalars or arrays.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    scalar = mu.ndim == 0 and sigma.ndim == 0
    mu, sigma = np.atleast_1d(mu), np.atleast_1d(sigma)
    ei = np.zeros(np.broadcast(mu, sigma).shape)
    live = sigma > 0
    g = np.zeros_like(ei)
    g[live] = (y_best - mu[live]) / sigma[live]
    ei[live] = (y_best - mu[live]) * _norm_cdf(g[live]) + sigma[live] * _norm_pdf(g[live])
    ei = np.maximum(ei, 0.0)
    return float(ei[0]) if scalar else ei


def ei_at(gp: GPModel, config: DeploymentConfig, y_best: float) -> float:
    mu, sigma = gp.predict_one(config)
    return expected_improvement(y_best, mu, sigma)


def candidate_configs(space: SearchSpace, rng: np.random.Generator,
                      n_random: int = N_RANDOM_CANDIDATES) -> list[DeploymentConfig]:
    """Deterministic, sorted candidate set for acquisition maximization."""
    if space.size <= EXHAUSTIVE_SPACE_LIMIT:
        return space.all_configs()
    workers = sorted(space.workers)
    memories = sorted(space.memories)
    mem_set = set(memories)
    pairs = {(w, m) for w in workers for m in COARSE_MEMORY_LATTICE if m in mem_set}
    w_idx = rng.integers(0, len(workers), size=n_random)
    m_idx = rng.integers(0, len(memories), size=n_random)
    pairs.update((workers[i], memories[j]) for i, j in zip(w_idx, m_idx))
    return [DeploymentConfig(w, m) for w, m in sorted(pairs)]


def propose_next(gp: GPModel, space: SearchSpace, y_best: float,
                 rng: np.random.Generator | None = None,
                 candidates: list[DeploymentConfig] | None = None) -> DeploymentConfig:
    """Argmax of EI over the candidate set.

    Candidates are sorted by (workers, memory), so ties resolve to the lowest
    worker count, then the lowest memory.
    """
    if candidates is None:
        candidates = candidate_configs(space, rng or np.random.default_rng(0))
    if not candidates:
        raise InvalidConfigError("empty candidate set")
    mu, sigma = gp.predict(candidates)
    ei = expected_improvement(y_best, mu, sigma)
    return candidates[int(np.argmax(ei))]


# ---------------------------------------------------------------------------
# Goal encodings
# ---------------------------------------------------------------------------

PENALTY_FACTOR = 10.0


@dataclass
class ObjectiveModel:
    """Maps a profiled observation to the scalar the search minimizes.

    Totals extrapolate the per-iteration profile over the work left in the
    plan; `elapsed` and `spent` carry what the job has already consumed so a
    mid-run re-optimization is judged against the remaining slack.
    """

    goal: UserGoal
    remaining_iterations: int
    elapsed: float = 0.0
    spent: float = 0.0

    def totals(self, obs: Observation) -> tuple[float, float]:
        t = self.elapsed + obs.iter_time * self.remaining_iterations
        s = self.spent + obs.iter_cost * self.remaining_iterations
        return t, s

    def evaluate(self, obs: Observation) -> tuple[float, bool, float]:
        """Returns (raw objective, feasible, relative constraint violation)."""
        t, s = self.totals(obs)
        if self.goal.mode == GOAL_DEADLINE:
            violation = max(0.0, t - self.goal.t_max) / self.goal.t_max
            return s, violation == 0.0, violation
        if self.goal.mode == GOAL_BUDGET:
            violation = max(0.0, s - self.goal.s_max) / self.goal.s_max
            return t, violation == 0.0, violation
        return t, True, 0.0

    def penalized(self, observations: list[Observation]) -> np.ndarray:
        """Penalty-folded objective vector; also refreshes .feasible flags.

        The penalty is scaled off the worst raw objective so any infeasible
        observation scores strictly worse than every feasible one, however
        small its violation.
        """
        raws, feas, viols = [], [], []
        for obs in observations:
            raw, ok, violation = self.evaluate(obs)
            obs.feasible = ok
            raws.append(raw)
            feas.append(ok)
            viols.append(violation)
        raws = np.array(raws)
        penalty = PENALTY_FACTOR * max(float(np.max(np.abs(raws))), 1e-12)
        out = raws.copy()
        for i, ok in enumerate(feas):
            if not ok:
                out[i] = raws[i] + penalty * (1.0 + viols[i])
        return out


def encode_objective(goal: UserGoal, remaining_iterations: int,
                     elapsed: float = 0.0, spent: float = 0.0) -> ObjectiveModel:
    return ObjectiveModel(goal, remaining_iterations, elapsed, spent)


# ---------------------------------------------------------------------------
# Search driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchLimits:
    k_init: int = 5
    k_max: int = 30
    ei_tolerance: float = 0.01  # stop when max EI < tol * |incumbent|

    def __post_init__(self):
        if self.k_init < 1 or self.k_max < 1:
            raise ValueError("k_init and k_max must be >= 1")
        if self.ei_tolerance < 0:
            raise ValueError("ei_tolerance must be >= 0")


def _stratified_draw(workers: list[int], memories: list[int], k: int,
                     rng: np.random.Generator) -> list[DeploymentConfig]:
    def strata(values: list[int]) -> list[int]:
        edges = np.linspace(0, len(values), k + 1)
        picks = []
        for i in range(k):
            lo, hi = int(edges[i]), max(int(edges[i + 1]), int(edges[i]) + 1)
            hi = min(hi, len(values))
            picks.append(values[int(rng.integers(lo, hi))])
        return picks

    w_picks = strata(workers)
    m_picks = strata(memories)
    order = rng.permutation(k)
    return [DeploymentConfig(w_picks[i], m_picks[order[i]]) for i in range(k)]


@dataclass
class SearchResult:
    best_config: DeploymentConfig
    best_observation: Observation
    observations: list[Observation]
    profiling_cost: float
    profiling_time: float
    feasible_found: bool
    stop_reason: str
    probes: int


def search(profiler, objective: ObjectiveModel, space: SearchSpace,
           limits: SearchLimits, seed: int,
           initial_observations: list[Observation] | None = None,
           incumbent: DeploymentConfig | None = None) -> SearchResult:
    """Profile-and-propose loop.

    `profiler(config) -> (Observation, probe_time, probe_cost)` runs a few
    real iterations under the candidate configuration.  Seeding uses k_init
    random configs (plus the incumbent, when given, so a re-optimization can
    never regress below the running configuration); afterwards each round
    fits the GP on penalized objectives and probes the EI argmax.  Stops when
    the acquisition collapses below ei_tolerance * |incumbent objective|, a
    proposal repeats an explored config, or k_max probes are spent.

    A profiler fault skips the probe (it still consumes budget) rather than
    aborting the search.
    """
    rng = np.random.default_rng([seed, 0x0B57])
    observations: list[Observation] = list(initial_observations or [])
    profiling_cost = 0.0
    profiling_time = 0.0
    probes = 0
    stop_reason = "k_max"

    def probe(config: DeploymentConfig) -> None:
        nonlocal profiling_cost, profiling_time, probes
        probes += 1
        try:
            obs, p_time, p_cost = profiler(config)
        except WorkerFault:
            return
        profiling_time += p_time
        profiling_cost += p_cost
        observations.append(obs)

    seen: set[tuple[int, int]] = {(o.config.workers, o.config.memory)
                                  for o in observations}
    seeds: list[DeploymentConfig] = []
    seed_keys: set[tuple[int, int]] = set()
    if incumbent is not None and (incumbent.workers, incumbent.memory) not in seen:
        seeds.append(incumbent)
        seed_keys.add((incumbent.workers, incumbent.memory))
    workers = sorted(space.workers)
    memories = sorted(space.memories)
    n_random = min(limits.k_init, space.size)
    # Latin-hypercube draw: one random config per axis stratum, memory strata
    # shuffled against worker strata.  Clustered seeds starve the GP of scale
    # information and make the acquisition collapse early.
    for c in _stratified_draw(workers, memories, n_random, rng):
        key = (c.workers, c.memory)
        if key in seen or key in seed_keys:
            continue
        seeds.append(c)
        seed_keys.add(key)
    for c in seeds:
        if probes >= limits.k_max:
            break
        probe(c)
        seen.add((c.workers, c.memory))

    candidates = candidate_configs(space, rng)
    while probes < limits.k_max:
        if not observations:
            # Every probe so far faulted; fall back to fresh random probes.
            c = DeploymentConfig(workers[rng.integers(0, len(workers))],
                                 memories[rng.integers(0, len(memories))])
            probe(c)
            seen.add((c.workers, c.memory))
            continue
        ys = objective.penalized(observations)
        y_best = float(np.min(ys))
        gp = gp_fit([o.config for o in observations], ys, space)
        mu, sigma = gp.predict(candidates)
        ei = expected_improvement(y_best, mu, sigma)
        best_idx = int(np.argmax(ei))
        if ei[best_idx] < limits.ei_tolerance * max(abs(y_best), 1e-12):
            stop_reason = "ei-collapsed"
            break
        proposal = candidates[best_idx]
        if (proposal.workers, proposal.memory) in seen:
            stop_reason = "repeat-proposal"
            break
        probe(proposal)
        seen.add((proposal.workers, proposal.memory))

    if not observations:
        raise WorkerFault("all profiling probes faulted; search has no data")
    ys = objective.penalized(observations)
    feasible = [i for i, o in enumerate(observations) if o.feasible]
    if feasible:
        best_i = min(feasible, key=lambda i: ys[i])
        feasible_found = True
    else:
        best_i = int(np.argmin(ys))
        feasible_found = False
    return SearchResult(observations[best_i].config, observations[best_i],
                        observations, profiling_cost, profiling_time,
                        feasible_found, stop_reason, probes)


def write_observations_csv(path: str, observations: list[Observation],
                           objective: ObjectiveModel | None = None) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["workers", "memory_mb", "iter_time_s", "iter_cost_usd",
                         "feasible", "objective"])
        if objective is not None and observations:
            ys = objective.penalized(observations)
        else:
            ys = [float("nan")] * len(observations)
        for obs, y in zip(observations, ys):
            writer.writerow([obs.config.workers, obs.config.memory,
                             repr(obs.iter_time), repr(obs.iter_cost),
                             int(obs.feasible), repr(float(y))])
