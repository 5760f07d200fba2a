import numpy as np
import pytest

from eblearn.checks import (
    TINY_ARCH,
    BenchTrace,
    CheckResult,
    adjoint_checks,
    bench_relaxation,
    random_problem,
    run_tier,
)


def test_tiny_problem_size(rng):
    params, x, y = random_problem(rng)
    assert params.size <= 1000
    assert x.shape == (1, 1, 8, 8) and y.shape == (1, 10) and y.sum() == 1
    params.check(TINY_ARCH)


def test_check_result():
    assert CheckResult.at_most("a", 1e-5, 1e-4).passed
    fail = CheckResult.at_most("a", 1e-3, 1e-4, "why")
    assert not fail.passed and fail.row() == ["a", "1.000e-03", "1.0e-04", "FAIL", "why"]


def test_adjoints_pass():
    assert all(r.passed for r in adjoint_checks())


def test_trace_target():
    t = BenchTrace("sync", "f32", [1.0, 1e-3, 1e-7], [1.0, 2.0, 3.0], 1e-6)
    assert t.iterations_to_target == 3
    assert BenchTrace("sync", "f32", [1.0], [1.0], 1e-6).iterations_to_target is None
    assert t.rows()[0] == ["sync", "f32", 1, "1.0", "1.000"]


def test_bench_stops_at_target(rng):
    params, x, _ = random_problem(rng)
    traces = bench_relaxation(params, x, max_iters=300, target=1e-6, precisions=("f32",))
    assert [t.scheme for t in traces] == ["sync", "async"]
    for t in traces:
        assert t.residuals[-1] <= 1e-6 and len(t.residuals) == t.iterations_to_target
        assert np.all(np.diff(t.millis) >= 0)


def test_unknown_tier():
    with pytest.raises(ValueError):
        run_tier("medium")
