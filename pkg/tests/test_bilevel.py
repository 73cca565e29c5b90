import math

import numpy as np
import pytest

from whitebilevel.agd import AGDConfig, nesterov_agd
from whitebilevel.bilevel import (
    BilevelConfig,
    IndefiniteHessianError,
    VanishingJacobianError,
    conjugate_gradient,
    gauss_newton_scalar,
    gn_direction,
    lambda_from_beta,
    learn_lambda,
    minimizer_sensitivity,
    solve_hessian_system,
)
from whitebilevel.degrade import make_gaussian_kernel, add_awgn_bsnr
from whitebilevel.losses import GaussLoss, MseLoss, WhiteLoss, loss_residual, loss_value
from whitebilevel.operators import ConvOperator, identity_kernel
from whitebilevel.synth import synthetic_image
from whitebilevel.tv import TVProblem, huber_hess

from oracles import dense_conv_matrix, dense_gradient_matrix


def test_lambda_from_beta():
    assert lambda_from_beta(0.0) == 1.0
    assert lambda_from_beta(2.0) == pytest.approx(7.389056098930650, rel=1e-14)
    for beta in (-700.0, -10.0, 0.0, 5.0):
        assert lambda_from_beta(beta) > 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        BilevelConfig(alpha=0.0)
    with pytest.raises(ValueError):
        BilevelConfig(alpha=1.0)
    with pytest.raises(ValueError):
        BilevelConfig(tol_d=0.0)
    with pytest.raises(ValueError):
        BilevelConfig(max_it=0)


def test_cg_zero_rhs():
    op = lambda v: 2.0 * v
    u, info = conjugate_gradient(op, np.zeros((4, 4)), 1e-10, 100)
    np.testing.assert_array_equal(u, np.zeros((4, 4)))
    assert info.converged and info.iterations == 0


def test_cg_solves_dense_spd_system():
    rng = np.random.default_rng(0)
    mat = rng.standard_normal((16, 16))
    spd = mat @ mat.T + 16 * np.eye(16)
    rhs = rng.standard_normal((4, 4))
    apply_op = lambda v: (spd @ v.ravel()).reshape(4, 4)
    u, info = conjugate_gradient(apply_op, rhs, 1e-12, 200)
    assert info.converged
    expected = np.linalg.solve(spd, rhs.ravel()).reshape(4, 4)
    np.testing.assert_allclose(u, expected, rtol=1e-9, atol=1e-12)


def test_cg_warm_start_converges_immediately():
    rng = np.random.default_rng(1)
    mat = rng.standard_normal((9, 9))
    spd = mat @ mat.T + 9 * np.eye(9)
    rhs = rng.standard_normal((3, 3))
    apply_op = lambda v: (spd @ v.ravel()).reshape(3, 3)
    u, _ = conjugate_gradient(apply_op, rhs, 1e-12, 100)
    u2, info2 = conjugate_gradient(apply_op, rhs, 1e-10, 100, x0=u)
    assert info2.iterations == 0
    np.testing.assert_array_equal(u2, u)


def test_cg_reports_max_iters():
    rng = np.random.default_rng(2)
    mat = rng.standard_normal((16, 16))
    spd = mat @ mat.T + 1e-3 * np.eye(16)
    rhs = rng.standard_normal((4, 4))
    apply_op = lambda v: (spd @ v.ravel()).reshape(4, 4)
    _, info = conjugate_gradient(apply_op, rhs, 1e-14, 2)
    assert not info.converged
    assert info.iterations == 2
    assert info.residual_norm > 0.0


def test_cg_detects_negative_curvature():
    apply_op = lambda v: -v
    with pytest.raises(IndefiniteHessianError):
        conjugate_gradient(apply_op, np.ones((3, 3)), 1e-10, 10)


def test_hessian_solve_identity_limit():
    rng = np.random.default_rng(3)
    y = rng.random((6, 6))
    prob = TVProblem(ConvOperator(identity_kernel(), (6, 6)), y, 1e-30, 1e-3)
    rhs = rng.standard_normal((6, 6))
    u, info = solve_hessian_system(y, prob, rhs, BilevelConfig())
    assert info.converged
    np.testing.assert_allclose(u, rhs, rtol=1e-6, atol=1e-10)


def test_hessian_solve_zero_rhs():
    rng = np.random.default_rng(4)
    y = rng.random((5, 5))
    prob = TVProblem(ConvOperator(make_gaussian_kernel(3, 1.0), (5, 5)), y, 0.1, 1e-2)
    u, info = solve_hessian_system(y, prob, np.zeros((5, 5)), BilevelConfig())
    np.testing.assert_array_equal(u, np.zeros((5, 5)))
    assert info.iterations == 0


def test_hessian_solve_matches_dense_assembly():
    rng = np.random.default_rng(5)
    shape = (8, 8)
    n = 64
    lam, eps = 0.2, 1e-2
    kernel = make_gaussian_kernel(3, 0.9)
    A = ConvOperator(kernel, shape)
    y = rng.random(shape)
    prob = TVProblem(A, y, lam, eps)
    x = rng.random(shape)
    rhs = rng.standard_normal(shape)

    a_mat = dense_conv_matrix(kernel.taps, kernel.anchor, shape)
    d_mat = dense_gradient_matrix(shape)
    g = (d_mat @ x.ravel()).reshape(2, n)
    w_mat = np.zeros((2 * n, 2 * n))
    for j in range(n):
        block = huber_hess(g[:, j], eps)
        w_mat[j, j] = block[0, 0]
        w_mat[j, n + j] = block[0, 1]
        w_mat[n + j, j] = block[1, 0]
        w_mat[n + j, n + j] = block[1, 1]
    h_dense = a_mat.T @ a_mat + lam * d_mat.T @ w_mat @ d_mat
    expected = np.linalg.solve(h_dense, rhs.ravel()).reshape(shape)

    u, info = solve_hessian_system(x, prob, rhs, BilevelConfig(cg_tol=1e-10, cg_max_iters=2000))
    assert info.converged
    assert np.linalg.norm(u - expected) <= 1e-6 * np.linalg.norm(expected)


def test_sensitivity_zero_for_constant_minimizer():
    y = np.full((6, 6), 0.5)
    prob = TVProblem(ConvOperator(identity_kernel(), (6, 6)), y, 0.3, 1e-3)
    sens, info = minimizer_sensitivity(y, prob, beta=math.log(0.3), cfg=BilevelConfig())
    np.testing.assert_array_equal(sens, np.zeros((6, 6)))
    assert info.iterations == 0


def test_sensitivity_scales_with_weight():
    rng = np.random.default_rng(6)
    shape = (8, 8)
    A = ConvOperator(make_gaussian_kernel(3, 0.9), shape)
    y = rng.random(shape)
    lam = 0.15
    prob = TVProblem(A, y, lam, 1e-2)
    x_star = nesterov_agd(prob, y, AGDConfig(tol=1e-8)).minimizer
    cfg = BilevelConfig(cg_tol=1e-10)
    beta = math.log(lam)
    sens, _ = minimizer_sensitivity(x_star, prob, beta, cfg)
    # frozen x*: doubling exp(beta) doubles the output
    sens2, _ = minimizer_sensitivity(x_star, prob, beta + math.log(2.0), cfg)
    np.testing.assert_allclose(sens2, 2.0 * sens, rtol=1e-8, atol=1e-12)


def test_sensitivity_matches_solve_twice_finite_difference():
    rng = np.random.default_rng(7)
    shape = (12, 12)
    A = ConvOperator(make_gaussian_kernel(3, 0.7), shape)
    truth = synthetic_image(16, 3)[:12, :12]
    y, _ = add_awgn_bsnr(A.apply(truth), 25.0, seed=1)
    beta = 0.0
    lam = lambda_from_beta(beta)
    eps = 1e-2
    tight = AGDConfig(tol=1e-10, max_iters=400_000)
    prob = TVProblem(A, y, lam, eps)
    x_star = nesterov_agd(prob, y, tight).minimizer
    sens, _ = minimizer_sensitivity(x_star, prob, beta, BilevelConfig(cg_tol=1e-10))
    h = 1e-3
    x_plus = nesterov_agd(TVProblem(A, y, lambda_from_beta(beta + h), eps), x_star, tight).minimizer
    x_minus = nesterov_agd(TVProblem(A, y, lambda_from_beta(beta - h), eps), x_star, tight).minimizer
    fd = (x_plus - x_minus) / (2 * h)
    assert np.linalg.norm(sens - fd) <= 1e-2 * np.linalg.norm(fd)


def test_gn_direction_cases():
    v = np.array([1.0, 2.0, -0.5])
    assert gn_direction(v, v) == pytest.approx(-1.0, rel=1e-15)
    assert gn_direction(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    # linear residual rho(beta) = beta - c with unit jacobian: exact step
    beta, c = 0.3, 1.7
    assert gn_direction(np.array([beta - c]), np.array([1.0])) == pytest.approx(c - beta, rel=1e-15)


def test_gn_direction_vanishing_jacobian():
    with pytest.raises(VanishingJacobianError):
        gn_direction(np.array([1.0]), np.array([0.0]))


def test_gauss_newton_scalar_full_step_converges_in_one():
    evaluate = lambda beta, i: (np.array([beta - 1.0]), np.array([1.0]))
    beta, steps, converged = gauss_newton_scalar(evaluate, beta0=5.0, alpha=1.0 - 1e-12,
                                                 tol_d=1e-9, max_it=10)
    # after one step beta is 1 up to the damping slack; second step detects it
    assert abs(steps[0][2] - 1.0) <= 1e-11
    assert converged and len(steps) == 2


def test_gauss_newton_scalar_geometric_decay():
    evaluate = lambda beta, i: (np.array([beta - 1.0]), np.array([1.0]))
    beta0 = 5.0
    beta, steps, converged = gauss_newton_scalar(evaluate, beta0=beta0, alpha=0.1,
                                                 tol_d=1e-14, max_it=60)
    for i, (beta_i, d_i, beta_next) in enumerate(steps):
        assert abs(beta_i - 1.0) == pytest.approx(0.9**i * abs(beta0 - 1.0), rel=1e-12)


def _small_instance(bsnr=20.0, size=16):
    truth = synthetic_image(size, 5)
    A = ConvOperator(make_gaussian_kernel(3, 0.8), truth.shape)
    y, sigma = add_awgn_bsnr(A.apply(truth), bsnr, seed=9)
    return truth, A, y, sigma


def test_learn_lambda_trace_and_positivity():
    truth, A, y, sigma = _small_instance()
    cfg = BilevelConfig(beta0=-2.0, alpha=0.3, max_it=12, cg_tol=1e-6)
    out = learn_lambda(y, A, GaussLoss(sigma), 1e-2, AGDConfig(tol=1e-6), cfg)
    assert len(out.trace) <= 12
    for rec in out.trace:
        assert rec.lam > 0.0
        assert rec.lam == pytest.approx(math.exp(rec.beta), rel=1e-15)
        assert rec.beta_next == pytest.approx(rec.beta + cfg.alpha * rec.direction, rel=1e-12)
    # final weight equals exp of the last updated log-weight
    assert out.lambda_hat == pytest.approx(math.exp(out.trace[-1].beta_next), rel=1e-15)
    # end-to-start descent
    assert out.trace[-1].q <= out.trace[0].q + 1e-12


def test_learn_lambda_deterministic():
    truth, A, y, sigma = _small_instance()
    cfg = BilevelConfig(beta0=-2.0, alpha=0.3, max_it=6, cg_tol=1e-6)
    a = learn_lambda(y, A, WhiteLoss(), 1e-2, AGDConfig(), cfg)
    b = learn_lambda(y, A, WhiteLoss(), 1e-2, AGDConfig(), cfg)
    assert a.lambda_hat == b.lambda_hat
    assert np.array_equal(a.minimizer, b.minimizer)
    assert [r.to_dict() for r in a.trace] == [r.to_dict() for r in b.trace]


def test_learn_lambda_noiseless_mse_descends():
    truth = synthetic_image(16, 8)
    A = ConvOperator(identity_kernel(), truth.shape)
    cfg = BilevelConfig(beta0=0.0, alpha=0.3, max_it=15, cg_tol=1e-6)
    out = learn_lambda(truth, A, MseLoss(truth), 1e-2, AGDConfig(), cfg)
    qs = [rec.q for rec in out.trace]
    assert all(q2 < q1 for q1, q2 in zip(qs, qs[1:]))
    assert np.max(np.abs(out.minimizer - truth)) < 0.05
    # the direction keeps pushing the weight down in the noiseless limit
    assert out.lambda_hat < 1.0


def test_learn_lambda_gauss_hits_discrepancy():
    truth, A, y, sigma = _small_instance(bsnr=15.0)
    cfg = BilevelConfig(beta0=-2.0, alpha=0.3, max_it=40, cg_tol=1e-6)
    out = learn_lambda(y, A, GaussLoss(sigma), 1e-2, AGDConfig(), cfg)
    r = A.apply(out.minimizer) - y
    m = y.size
    assert abs(np.sum(r * r) - m * sigma**2) / (m * sigma**2) <= 0.02


def test_derivative_chain_matches_q_finite_difference():
    # end-to-end implicit-differentiation check on a 12x12 instance
    rng = np.random.default_rng(11)
    shape = (12, 12)
    A = ConvOperator(make_gaussian_kernel(3, 0.7), shape)
    truth = synthetic_image(16, 4)[:12, :12]
    y, sigma = add_awgn_bsnr(A.apply(truth), 20.0, seed=2)
    eps = 1e-2
    beta = 0.0
    h = 1e-3
    tight = AGDConfig(tol=1e-10, max_iters=400_000)
    cfg = BilevelConfig(cg_tol=1e-10)

    lam = lambda_from_beta(beta)
    prob = TVProblem(A, y, lam, eps)
    x_star = nesterov_agd(prob, y, tight).minimizer
    sens, _ = minimizer_sensitivity(x_star, prob, beta, cfg)

    x_plus = nesterov_agd(TVProblem(A, y, lambda_from_beta(beta + h), eps), x_star, tight).minimizer
    x_minus = nesterov_agd(TVProblem(A, y, lambda_from_beta(beta - h), eps), x_star, tight).minimizer

    from whitebilevel.losses import loss_residual_jacobian

    for kind in (MseLoss(truth), GaussLoss(sigma), WhiteLoss()):
        lr = loss_residual(kind, x_star, A, y)
        jac = loss_residual_jacobian(kind, x_star, sens, A, y)
        dq = float(np.dot(lr.values, jac))
        q_plus = loss_value(loss_residual(kind, x_plus, A, y))
        q_minus = loss_value(loss_residual(kind, x_minus, A, y))
        fd = (q_plus - q_minus) / (2 * h)
        assert abs(dq - fd) <= 5e-2 * abs(fd), f"{type(kind).__name__}: {dq} vs {fd}"
