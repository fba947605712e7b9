import math

import numpy as np
import pytest

from faastrain.errors import InvalidConfigError, WorkerFault
from faastrain.optimizer import (
    GOAL_BUDGET,
    GOAL_DEADLINE,
    GOAL_FASTEST,
    DeploymentConfig,
    Observation,
    SearchLimits,
    SearchSpace,
    UserGoal,
    candidate_configs,
    encode_objective,
    expected_improvement,
    gp_fit,
    propose_next,
    search,
)


def grid_space(nw=6, nm=6):
    return SearchSpace(tuple(range(1, nw + 1)),
                       tuple(np.linspace(512, 8192, nm, dtype=int)))


# ---------------------------------------------------------------------------
# GP regression
# ---------------------------------------------------------------------------


def direct_gp_solve(X, y, ls, noise):
    """Independent GP oracle: plain dense solve of the posterior equations."""
    def kernel(A, B):
        d = (A[:, None, :] - B[None, :, :]) / ls
        return np.exp(-0.5 * np.sum(d ** 2, axis=2))

    mean = y.mean()
    std = y.std() if y.std() > 0 else 1.0
    z = (y - mean) / std
    K = kernel(X, X) + noise * np.eye(len(X))
    alpha = np.linalg.solve(K, z)

    def predict(Xq):
        Kq = kernel(Xq, X)
        mu = mean + std * Kq @ alpha
        var = 1.0 - np.einsum("ij,ji->i", Kq, np.linalg.solve(K, Kq.T))
        return mu, std * np.sqrt(np.maximum(var, 0.0))

    return predict


def test_gp_interpolates_single_observation():
    space = grid_space()
    c = DeploymentConfig(3, 2048)
    gp = gp_fit([c], np.array([7.5]), space)
    mu, sigma = gp.predict_one(c)
    assert mu == pytest.approx(7.5, abs=1e-6)
    assert sigma < 1e-4


def test_gp_prior_with_no_observations():
    space = grid_space()
    gp = gp_fit([], np.zeros(0), space)
    mu, sigma = gp.predict_one(DeploymentConfig(2, 1024))
    assert mu == gp.prior_mean == 0.0
    assert sigma == pytest.approx(math.sqrt(gp.signal_variance))


def test_gp_posterior_mean_interpolates_training_points():
    rng = np.random.default_rng(12)
    space = grid_space()
    configs = [DeploymentConfig(int(w), int(m))
               for w, m in zip(rng.choice(space.workers, 5, replace=False),
                               rng.choice(space.memories, 5, replace=False))]
    y = rng.normal(size=5)
    gp = gp_fit(configs, y, space)
    mu, _ = gp.predict(configs)
    np.testing.assert_allclose(mu, y, atol=1e-6)


def test_gp_matches_direct_solve_oracle():
    rng = np.random.default_rng(7)
    space = grid_space()
    configs = [DeploymentConfig(int(rng.integers(1, 7)), int(rng.integers(512, 8193)))
               for _ in range(5)]
    # dedupe to keep the oracle kernel nonsingular
    configs = list({(c.workers, c.memory): c for c in configs}.values())
    space = SearchSpace(tuple(range(1, 7)), tuple(range(512, 8193)))
    y = rng.normal(size=len(configs))
    gp = gp_fit(configs, y, space)
    from faastrain.optimizer import _normalize

    X = _normalize(space, configs)
    oracle = direct_gp_solve(X, y, gp.length_scales, gp._jitter)
    queries = [DeploymentConfig(int(rng.integers(1, 7)), int(rng.integers(512, 8193)))
               for _ in range(20)]
    Xq = _normalize(space, queries)
    mu_o, sd_o = oracle(Xq)
    mu, sd = gp.predict(queries)
    np.testing.assert_allclose(mu, mu_o, atol=1e-8)
    np.testing.assert_allclose(sd, sd_o, atol=1e-6)


def test_gp_far_from_data_reverts_to_prior():
    space = SearchSpace(tuple(range(1, 65)), tuple(range(128, 10241)))
    configs = [DeploymentConfig(1, 128), DeploymentConfig(1, 192)]
    y = np.array([2.0, 4.0])
    gp = gp_fit(configs, y, space)
    mu, sigma = gp.predict_one(DeploymentConfig(64, 10240))
    assert mu == pytest.approx(gp.prior_mean, abs=1e-3)
    assert sigma == pytest.approx(math.sqrt(gp.signal_variance), rel=1e-3)


def test_gp_symmetric_midpoint():
    # Midpoint of two symmetric observations predicts their average.
    space = SearchSpace(tuple(range(1, 10)), (1024,))
    configs = [DeploymentConfig(3, 1024), DeploymentConfig(7, 1024)]
    y = np.array([1.0, 3.0])
    gp = gp_fit(configs, y, space)
    mu, _ = gp.predict_one(DeploymentConfig(5, 1024))
    assert mu == pytest.approx(2.0, abs=1e-9)


# ---------------------------------------------------------------------------
# expected improvement
# ---------------------------------------------------------------------------


def test_ei_zero_when_no_uncertainty():
    assert expected_improvement(1.0, 1.0, 0.0) == 0.0
    assert expected_improvement(1.0, 5.0, 0.0) == 0.0


def test_ei_at_incumbent_with_unit_sigma():
    # EI(mu=y_best, sigma=1) = phi(0) = 1/sqrt(2*pi)
    assert expected_improvement(10.0, 10.0, 1.0) == pytest.approx(
        1.0 / math.sqrt(2 * math.pi), abs=1e-9)


def test_ei_hand_value():
    # y_best=10, mu=8, sigma=1 -> 2*Phi(2) + phi(2)
    import mpmath

    expected = float(2 * mpmath.ncdf(2) + mpmath.npdf(2))
    assert expected_improvement(10.0, 8.0, 1.0) == pytest.approx(expected, abs=1e-12)
    assert expected_improvement(10.0, 8.0, 1.0) == pytest.approx(2.00849, abs=1e-5)


def test_ei_nonnegative_everywhere():
    rng = np.random.default_rng(0)
    mu = rng.normal(0, 5, size=1000)
    sigma = np.abs(rng.normal(0, 2, size=1000))
    sigma[::7] = 0.0
    ei = expected_improvement(0.5, mu, sigma)
    assert np.all(ei >= 0)
    assert np.all(ei[(sigma == 0) & (mu >= 0.5)] == 0)


def test_ei_monte_carlo_equivalence():
    rng = np.random.default_rng(123)
    z = rng.standard_normal(2_000_000)
    z = np.concatenate([z, -z])  # antithetic halves the MC error
    for _ in range(10):
        mu = float(rng.uniform(-2, 2))
        sigma = float(rng.uniform(0.05, 1.5))
        y_best = float(rng.uniform(-2, 2))
        mc = np.maximum(y_best - (mu + sigma * z), 0.0).mean()
        assert expected_improvement(y_best, mu, sigma) == pytest.approx(mc, abs=1e-3)


# ---------------------------------------------------------------------------
# propose_next
# ---------------------------------------------------------------------------


def test_propose_single_point_space():
    space = SearchSpace((4,), (2048,))
    gp = gp_fit([], np.zeros(0), space)
    assert propose_next(gp, space, y_best=1.0) == DeploymentConfig(4, 2048)


def test_propose_prefers_positive_ei():
    space = SearchSpace((1, 2, 3), (1024,))
    # observe two points with values above the incumbent; the unobserved one
    # keeps posterior uncertainty and is the only positive-EI candidate
    configs = [DeploymentConfig(1, 1024), DeploymentConfig(3, 1024)]
    gp = gp_fit(configs, np.array([5.0, 7.0]), space)
    assert propose_next(gp, space, y_best=5.0) == DeploymentConfig(2, 1024)


def test_propose_tie_break_lowest_workers_then_memory():
    space = SearchSpace((2, 1), (4096, 1024))
    gp = gp_fit([], np.zeros(0), space)  # uniform prior -> all EI equal
    assert propose_next(gp, space, y_best=0.0) == DeploymentConfig(1, 1024)


def test_propose_empty_candidates_rejected():
    space = SearchSpace((1,), (1024,))
    gp = gp_fit([], np.zeros(0), space)
    with pytest.raises(InvalidConfigError):
        propose_next(gp, space, 0.0, candidates=[])


def test_ei_vanishes_at_observed_points():
    # no re-probing: observed points carry ~zero posterior uncertainty
    rng = np.random.default_rng(3)
    space = grid_space()
    configs = [DeploymentConfig(int(w), int(m))
               for w, m in zip(rng.choice(space.workers, 4, replace=False),
                               rng.choice(space.memories, 4, replace=False))]
    y = rng.uniform(1.0, 5.0, size=4)
    gp = gp_fit(configs, y, space)
    y_best = float(y.min())
    mu, sigma = gp.predict(configs)
    ei = expected_improvement(y_best, mu, sigma)
    assert np.all(ei < 1e-6 * abs(y_best))


def test_candidate_configs_cover_small_space():
    space = grid_space(4, 4)
    cands = candidate_configs(space, np.random.default_rng(0))
    assert len(cands) == 16
    assert cands == sorted(cands, key=lambda c: (c.workers, c.memory))


def test_candidate_configs_large_space_lattice_plus_sample():
    space = SearchSpace.from_ranges(1, 32, 128, 10240, 1)
    cands = candidate_configs(space, np.random.default_rng(0), n_random=256)
    assert len(cands) <= 32 * 41 + 256
    assert DeploymentConfig(1, 128) in cands  # lattice floor present


# ---------------------------------------------------------------------------
# goal encodings
# ---------------------------------------------------------------------------


def obs(w, m, t, c):
    return Observation(DeploymentConfig(w, m), iter_time=t, iter_cost=c)


def test_objective_deadline_feasible_is_cost():
    model = encode_objective(UserGoal(GOAL_DEADLINE, t_max=100.0), remaining_iterations=10)
    o = obs(2, 1024, t=5.0, c=0.01)
    ys = model.penalized([o])
    assert o.feasible
    assert ys[0] == pytest.approx(0.1)


def test_objective_penalty_dominates_any_feasible():
    model = encode_objective(UserGoal(GOAL_DEADLINE, t_max=100.0), remaining_iterations=10)
    cheap_but_late = obs(1, 128, t=10.0001, c=1e-6)  # barely violates
    rich_but_on_time = obs(8, 8192, t=9.0, c=5.0)
    ys = model.penalized([cheap_but_late, rich_but_on_time])
    assert not cheap_but_late.feasible
    assert rich_but_on_time.feasible
    assert ys[0] > ys[1]


def test_objective_budget_mode():
    model = encode_objective(UserGoal(GOAL_BUDGET, s_max=1.0), remaining_iterations=10)
    within = obs(2, 1024, t=3.0, c=0.05)
    over = obs(8, 8192, t=1.0, c=0.2)
    ys = model.penalized([within, over])
    assert within.feasible and not over.feasible
    assert ys[0] == pytest.approx(30.0)
    assert ys[1] > ys[0]


def test_objective_fastest_mode():
    model = encode_objective(UserGoal(GOAL_FASTEST), remaining_iterations=4)
    ys = model.penalized([obs(1, 1024, t=2.0, c=9.9)])
    assert ys[0] == pytest.approx(8.0)


def test_objective_accounts_for_elapsed_and_spent():
    model = encode_objective(UserGoal(GOAL_DEADLINE, t_max=100.0),
                             remaining_iterations=10, elapsed=95.0, spent=0.5)
    o = obs(2, 1024, t=1.0, c=0.01)  # 95 + 10 > 100 -> infeasible now
    model.penalized([o])
    assert not o.feasible


def test_penalized_minimum_matches_bruteforce_on_toy_grid():
    # 5x5 grid with known totals; compare against exhaustive constrained argmin
    goal = UserGoal(GOAL_DEADLINE, t_max=60.0)
    model = encode_objective(goal, remaining_iterations=1)
    rng = np.random.default_rng(42)
    observations = []
    for w in range(1, 6):
        for m in (512, 1024, 2048, 4096, 8192):
            t = float(100.0 / w + rng.uniform(0, 5))
            c = float(t * w * m * 1e-6)
            observations.append(obs(w, m, t, c))
    ys = model.penalized(observations)
    best_penalized = observations[int(np.argmin(ys))]
    feasible = [o for o in observations if o.iter_time <= 60.0]
    oracle = min(feasible, key=lambda o: o.iter_cost)
    assert best_penalized.config == oracle.config


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def surface_profiler(time_fn, cost_fn):
    def profiler(config):
        t = time_fn(config)
        c = cost_fn(config)
        return Observation(config, iter_time=t, iter_cost=c), t, c

    return profiler


def test_search_single_probe():
    space = grid_space()
    profiler = surface_profiler(lambda c: 1.0 + c.workers, lambda c: 0.01)
    result = search(profiler, encode_objective(UserGoal(GOAL_FASTEST), 1), space,
                    SearchLimits(k_init=1, k_max=1), seed=0)
    assert result.probes == 1
    assert len(result.observations) == 1
    assert result.best_config == result.observations[0].config


def test_search_constant_surface_collapses_quickly():
    space = grid_space()
    profiler = surface_profiler(lambda c: 3.0, lambda c: 0.01)
    limits = SearchLimits(k_init=5, k_max=30)
    result = search(profiler, encode_objective(UserGoal(GOAL_FASTEST), 1), space,
                    limits, seed=1)
    assert result.stop_reason in ("ei-collapsed", "repeat-proposal")
    assert result.probes <= limits.k_init + 2


def test_search_monotone_incumbent_and_determinism():
    space = grid_space()

    def time_fn(c):
        return 50.0 / (c.workers * c.memory / 1024.0) + 0.3 * c.workers

    profiler = surface_profiler(time_fn, lambda c: 0.01)
    objective = encode_objective(UserGoal(GOAL_FASTEST), 1)
    r1 = search(profiler, objective, space, SearchLimits(), seed=3)
    r2 = search(profiler, objective, space, SearchLimits(), seed=3)
    assert [o.config for o in r1.observations] == [o.config for o in r2.observations]
    # monotone incumbent over probe order
    best = math.inf
    for o in r1.observations:
        best = min(best, o.iter_time)
    assert r1.best_observation.iter_time == best


def test_search_keeps_incumbent_config_in_probes():
    space = grid_space()
    profiler = surface_profiler(lambda c: 1.0 + c.workers * 0.1, lambda c: 0.01)
    incumbent = DeploymentConfig(6, 8192)
    result = search(profiler, encode_objective(UserGoal(GOAL_FASTEST), 1), space,
                    SearchLimits(k_init=2, k_max=5), seed=0, incumbent=incumbent)
    assert result.observations[0].config == incumbent


def test_search_survives_profiler_faults():
    space = grid_space()
    calls = {"n": 0}

    def flaky(config):
        calls["n"] += 1
        if calls["n"] % 2 == 0:
            raise WorkerFault("probe died")
        t = 1.0 + 0.1 * config.workers
        return Observation(config, t, 0.01), t, 0.01

    result = search(flaky, encode_objective(UserGoal(GOAL_FASTEST), 1), space,
                    SearchLimits(k_init=4, k_max=10), seed=5)
    assert result.probes <= 10
    assert len(result.observations) >= 1


def test_search_flags_when_nothing_feasible():
    space = grid_space()
    profiler = surface_profiler(lambda c: 100.0, lambda c: 0.01)
    goal = UserGoal(GOAL_DEADLINE, t_max=1.0)
    result = search(profiler, encode_objective(goal, 10), space, SearchLimits(),
                    seed=0)
    assert not result.feasible_found


def test_search_quadratic_surface_converges_to_grid_optimum():
    # propose/observe loop should land within one grid cell of the minimizer
    space = SearchSpace(tuple(range(1, 11)), tuple(range(1024, 11 * 1024, 1024)))

    def time_fn(c):
        return (c.workers - 6) ** 2 + (c.memory / 1024.0 - 7) ** 2 + 1.0

    profiler = surface_profiler(time_fn, lambda c: 0.01)
    result = search(profiler, encode_objective(UserGoal(GOAL_FASTEST), 1), space,
                    SearchLimits(k_init=5, k_max=25), seed=7)
    assert abs(result.best_config.workers - 6) <= 1
    assert abs(result.best_config.memory / 1024 - 7) <= 1
