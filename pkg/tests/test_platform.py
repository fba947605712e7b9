import numpy as np
import pytest

from faastrain.errors import InvalidConfigError
from faastrain.platform import (
    OUTCOME_COMPLETED,
    OUTCOME_DURATION_EXCEEDED,
    OUTCOME_FAILED,
    FunctionSpec,
    PlatformParams,
    SimPlatform,
    billed_cost,
    compute_speed,
)

REF = PlatformParams(reference_memory=3072)


@pytest.mark.parametrize("memory,expected", [(3072, 1.0), (6144, 2.0), (1536, 0.5)])
def test_compute_speed_proportional(memory, expected):
    assert compute_speed(memory, REF) == expected


@pytest.mark.parametrize("memory", [64, 127, 10241, 20000])
def test_compute_speed_rejects_out_of_range(memory):
    with pytest.raises(InvalidConfigError):
        compute_speed(memory, REF)


def test_compute_speed_monotone():
    speeds = [compute_speed(m, REF) for m in range(128, 10241, 512)]
    assert all(b > a for a, b in zip(speeds, speeds[1:]))


def test_billed_cost_values():
    p = PlatformParams(price_per_gb_second=1.6667e-5, price_per_invocation=0.0)
    assert billed_cost(3072, 100.0, p) == pytest.approx(3.0 * 100.0 * 1.6667e-5, rel=1e-12)
    assert billed_cost(1024, 900.0, p) == pytest.approx(1.0 * 900.0 * 1.6667e-5, rel=1e-12)
    assert billed_cost(1024, 900.0, p) == pytest.approx(0.0150003, abs=1e-7)
    assert billed_cost(8192, 0.0, p) == 0.0


def test_billed_cost_linear_in_duration_and_memory():
    p = PlatformParams(price_per_invocation=0.0)
    base = billed_cost(2048, 50.0, p)
    assert billed_cost(2048, 100.0, p) == pytest.approx(2 * base)
    assert billed_cost(4096, 50.0, p) == pytest.approx(2 * base)


def test_pure_compute_cost_is_memory_invariant():
    # Doubling memory halves compute time, so compute-only billing is flat.
    p = PlatformParams(cold_start=0.0, invocation_delay=0.0, price_per_invocation=0.0)
    work = 120.0
    costs = []
    for memory in (1024, 2048, 3072, 6144, 10240):
        platform = SimPlatform(p)
        rec, _ = platform.invoke(FunctionSpec(memory=memory),
                                 lambda s: s.compute(work))
        costs.append(rec.billed_cost)
    assert np.allclose(costs, costs[0], rtol=1e-12)


def test_invoke_wall_time_arithmetic():
    p = PlatformParams(max_duration=900, cold_start=2.0, invocation_delay=0.5,
                       reference_memory=3072)
    platform = SimPlatform(p)
    rec, out = platform.invoke(FunctionSpec(memory=3072),
                               lambda s: s.compute(100.0) or "done")
    assert rec.outcome == OUTCOME_COMPLETED
    assert rec.duration == pytest.approx(102.5)
    assert out == "done"


def test_invoke_caps_at_duration_limit():
    platform = SimPlatform(PlatformParams(max_duration=900, cold_start=2.0,
                                          invocation_delay=0.5))
    rec, out = platform.invoke(FunctionSpec(memory=3072),
                               lambda s: s.compute(2000.0))
    assert rec.outcome == OUTCOME_DURATION_EXCEEDED
    assert rec.duration == pytest.approx(900.0, abs=1e-12)
    assert out is None


def test_failure_rate_one_always_fails():
    platform = SimPlatform(PlatformParams(failure_rate=1.0))
    for _ in range(5):
        rec, out = platform.invoke(FunctionSpec(memory=3072),
                                   lambda s: s.compute(1.0) or "x")
        assert rec.outcome == OUTCOME_FAILED
        assert out is None  # success output suppressed


def test_invoke_rejects_bad_handler():
    platform = SimPlatform(PlatformParams())
    from faastrain.errors import InvocationError

    with pytest.raises(InvocationError):
        platform.invoke(FunctionSpec(memory=3072), None)


def test_warm_start_skips_cold_start_after_completion():
    p = PlatformParams(cold_start=4.0, invocation_delay=0.5)
    platform = SimPlatform(p)
    rec1, _ = platform.invoke(FunctionSpec(memory=3072), lambda s: s.compute(10.0),
                              slot="w0")
    rec2, _ = platform.invoke(FunctionSpec(memory=3072), lambda s: s.compute(10.0),
                              slot="w0")
    assert rec1.duration == pytest.approx(14.5)
    assert rec2.duration == pytest.approx(10.5)  # warm: no cold start


def test_abnormal_exit_forces_cold_restart():
    p = PlatformParams(cold_start=4.0, invocation_delay=0.5, max_duration=20.0)
    platform = SimPlatform(p)
    rec1, _ = platform.invoke(FunctionSpec(memory=3072), lambda s: s.compute(100.0),
                              slot="w0")
    assert rec1.outcome == OUTCOME_DURATION_EXCEEDED
    rec2, _ = platform.invoke(FunctionSpec(memory=3072), lambda s: s.compute(1.0),
                              slot="w0")
    assert rec2.duration == pytest.approx(5.5)  # cold again


def test_no_record_exceeds_max_duration():
    platform = SimPlatform(PlatformParams(max_duration=50.0, failure_rate=0.3,
                                          rng_seed=7))
    rng = np.random.default_rng(3)
    for _ in range(50):
        work = float(rng.uniform(1.0, 120.0))
        platform.invoke(FunctionSpec(memory=2048), lambda s, w=work: s.compute(w))
    assert all(r.duration <= 50.0 + 1e-12 for r in platform.records)


def test_deterministic_ledger():
    def workload(platform):
        rng = np.random.default_rng(11)
        for _ in range(30):
            work = float(rng.uniform(0.5, 40.0))
            platform.invoke(FunctionSpec(memory=1536), lambda s, w=work: s.compute(w))
        return [(r.instance_id, r.start_time, r.end_time, r.outcome, r.billed_cost)
                for r in platform.records]

    params = PlatformParams(max_duration=30.0, failure_rate=0.25, rng_seed=42)
    assert workload(SimPlatform(params)) == workload(SimPlatform(params))


def test_ledger_csv_roundtrip(tmp_path):
    platform = SimPlatform(PlatformParams())
    platform.invoke(FunctionSpec(memory=3072), lambda s: s.compute(5.0))
    path = tmp_path / "ledger.csv"
    platform.write_ledger_csv(str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "instance_id,start,end,outcome,cost"
    assert len(lines) == 2
