import numpy as np
import pytest

from whitebilevel.agd import AGDConfig, nesterov_agd
from whitebilevel.degrade import make_gaussian_kernel
from whitebilevel.operators import ConvOperator, identity_kernel
from whitebilevel.tv import TVProblem


def test_config_validation():
    with pytest.raises(ValueError):
        AGDConfig(tol=0.0)
    with pytest.raises(ValueError):
        AGDConfig(max_iters=0)


def test_fidelity_dominated_recovers_observation():
    rng = np.random.default_rng(0)
    y = np.full((6, 6), 0.42)
    prob = TVProblem(ConvOperator(identity_kernel(), (6, 6)), y, 1e-12, 1e-3)
    res = nesterov_agd(prob, rng.random((6, 6)), AGDConfig())
    assert res.converged
    assert np.max(np.abs(res.minimizer - y)) <= 1e-6


def test_objective_matches_long_run_reference():
    rng = np.random.default_rng(11)
    y = rng.random((8, 8))
    prob = TVProblem(ConvOperator(identity_kernel(), (8, 8)), y, 0.1, 1e-2)
    res = nesterov_agd(prob, y, AGDConfig(tol=1e-6, max_iters=50_000))
    ref = nesterov_agd(prob, y, AGDConfig(tol=1e-10, max_iters=500_000))
    assert res.converged and ref.converged
    rel = abs(res.final_objective - ref.final_objective) / abs(ref.final_objective)
    assert rel <= 1e-8


def test_warm_restart_is_a_fixed_point():
    rng = np.random.default_rng(1)
    y = rng.random((8, 8))
    prob = TVProblem(ConvOperator(make_gaussian_kernel(3, 0.8), (8, 8)), y, 0.05, 1e-2)
    first = nesterov_agd(prob, y, AGDConfig())
    again = nesterov_agd(prob, first.minimizer, AGDConfig())
    assert again.iterations <= 2


def test_objective_never_exceeds_start():
    rng = np.random.default_rng(2)
    y = rng.random((10, 10))
    prob = TVProblem(ConvOperator(make_gaussian_kernel(5, 1.5), (10, 10)), y, 0.2, 1e-3)
    x0 = rng.random((10, 10))
    res = nesterov_agd(prob, x0, AGDConfig())
    assert res.final_objective <= prob.value(x0) + 1e-12


def test_gradient_norm_reduction():
    rng = np.random.default_rng(3)
    y = rng.random((16, 16))
    prob = TVProblem(ConvOperator(make_gaussian_kernel(5, 1.2), (16, 16)), y, 0.05, 1e-2)
    res = nesterov_agd(prob, y, AGDConfig())
    ratio = np.linalg.norm(prob.grad(res.minimizer)) / (1.0 + np.linalg.norm(prob.grad(y)))
    assert ratio < 1e-4


def test_determinism_bit_identical():
    rng = np.random.default_rng(4)
    y = rng.random((8, 8))
    prob = TVProblem(ConvOperator(make_gaussian_kernel(3, 1.0), (8, 8)), y, 0.1, 1e-2)
    a = nesterov_agd(prob, y, AGDConfig())
    b = nesterov_agd(prob, y, AGDConfig())
    assert np.array_equal(a.minimizer, b.minimizer)
    assert a.iterations == b.iterations
    assert a.final_objective == b.final_objective


def test_running_minimum_of_objective_is_monotone():
    rng = np.random.default_rng(5)
    y = rng.random((8, 8))
    prob = TVProblem(ConvOperator(make_gaussian_kernel(3, 1.0), (8, 8)), y, 0.3, 1e-3)
    objectives = []
    nesterov_agd(prob, y, AGDConfig(max_iters=400),
                 callback=lambda t, obj, step: objectives.append(obj))
    running = np.minimum.accumulate(objectives)
    assert np.all(np.diff(running) <= 0.0)


def test_callback_sees_every_iteration():
    rng = np.random.default_rng(6)
    y = rng.random((6, 6))
    prob = TVProblem(ConvOperator(identity_kernel(), (6, 6)), y, 0.01, 1e-2)
    seen = []
    res = nesterov_agd(prob, y, AGDConfig(), callback=lambda t, obj, step: seen.append(t))
    assert seen == list(range(res.iterations))


def test_max_iters_reported_not_fatal():
    rng = np.random.default_rng(7)
    y = rng.random((8, 8))
    prob = TVProblem(ConvOperator(make_gaussian_kernel(5, 1.5), (8, 8)), y, 1.0, 1e-3)
    res = nesterov_agd(prob, y, AGDConfig(tol=1e-12, max_iters=5))
    assert not res.converged
    assert res.iterations == 5
    assert np.all(np.isfinite(res.minimizer))


def test_at_least_one_iteration_runs():
    y = np.full((5, 5), 0.5)
    prob = TVProblem(ConvOperator(identity_kernel(), (5, 5)), y, 1e-6, 1e-3)
    res = nesterov_agd(prob, y, AGDConfig())
    assert res.iterations >= 1
