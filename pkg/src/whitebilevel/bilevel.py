"""Bilevel learning of the regularization weight.

The outer problem minimizes a quality loss Q(x*(lam)) over lam > 0.  The
positive constraint is removed by the change of variables lam = exp(beta);
the minimizer sensitivity dx*/dbeta then follows from the implicit function
theorem applied to the inner stationarity condition:

    dx*/dbeta = -H^{-1} g_lam * exp(beta),

where H is the inner Hessian at x* and g_lam the partial derivative of the
inner gradient w.r.t. lam.  H is symmetric positive definite here (the blur
and gradient operators share only the trivial kernel), so the linear system
is solved by matrix-free conjugate gradients.  The outer loop is a damped
scalar Gauss-Newton iteration on the residual form of the loss, warm
starting each inner solve from the previous minimizer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .agd import AGDConfig, AGDResult, nesterov_agd
from .image import as_image
from .losses import LossKind, loss_residual, loss_residual_jacobian, loss_value
from .operators import ConvOperator
from .tv import TVProblem

__all__ = [
    "BilevelConfig",
    "TraceRecord",
    "BilevelResult",
    "VanishingJacobianError",
    "IndefiniteHessianError",
    "CGInfo",
    "lambda_from_beta",
    "conjugate_gradient",
    "solve_hessian_system",
    "minimizer_sensitivity",
    "gn_direction",
    "gauss_newton_scalar",
    "learn_lambda",
]

logger = logging.getLogger(__name__)

VANISHING_JACOBIAN_FLOOR = 1e-30


class VanishingJacobianError(RuntimeError):
    """The loss is locally flat in the log-parameter; no direction exists."""


class IndefiniteHessianError(RuntimeError):
    """Negative curvature met in CG; usually an unconverged inner solve."""


@dataclass(frozen=True)
class BilevelConfig:
    beta0: float = 2.0
    alpha: float = 0.1
    tol_d: float = 1e-5
    max_it: int = 60
    cg_tol: float = 1e-8
    cg_max_iters: int | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.tol_d <= 0:
            raise ValueError("tol_d must be positive")
        if self.max_it < 1:
            raise ValueError("max_it must be at least 1")
        if self.cg_tol <= 0:
            raise ValueError("cg_tol must be positive")


@dataclass
class TraceRecord:
    """One outer iteration: state evaluated, step taken, solver effort."""

    iteration: int
    beta: float
    lam: float
    q: float
    direction: float
    beta_next: float
    lower_iterations: int
    cg_iterations: int

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "beta": self.beta,
            "lambda": self.lam,
            "q": self.q,
            "direction": self.direction,
            "beta_next": self.beta_next,
            "lower_iterations": self.lower_iterations,
            "cg_iterations": self.cg_iterations,
        }


@dataclass
class BilevelResult:
    lambda_hat: float
    minimizer: np.ndarray
    trace: list[TraceRecord]
    converged: bool
    final_lower: AGDResult


@dataclass
class CGInfo:
    iterations: int
    residual_norm: float
    converged: bool


def lambda_from_beta(beta: float) -> float:
    """Map the unconstrained log-parameter to a strictly positive weight."""
    return math.exp(beta)


def conjugate_gradient(apply_op, rhs: np.ndarray, tol: float, max_iters: int,
                       precond=None, x0: np.ndarray | None = None):
    """Solve ``apply_op(u) = rhs`` for an SPD operator by (preconditioned) CG.

    Stops when the true residual norm drops below ``tol * ||rhs||``.
    ``precond``, when given, applies an SPD approximate inverse; ``x0`` is an
    optional warm start.  Neither changes what the iteration converges to.
    Raises :class:`IndefiniteHessianError` on negative curvature; running out
    of iterations is reported through the returned :class:`CGInfo`.
    """
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return np.zeros_like(rhs), CGInfo(iterations=0, residual_norm=0.0, converged=True)
    target = tol * rhs_norm
    if x0 is None:
        u = np.zeros_like(rhs)
        r = rhs.copy()
    else:
        u = x0.copy()
        r = rhs - apply_op(u)
    res_norm = float(np.linalg.norm(r))
    if res_norm <= target:
        return u, CGInfo(iterations=0, residual_norm=res_norm, converged=True)
    z = precond(r) if precond is not None else r
    p = z.copy()
    rz = float(np.sum(r * z))
    for k in range(max_iters):
        hp = apply_op(p)
        curvature = float(np.sum(p * hp))
        if curvature <= -1e-14 * float(np.sum(p * p)):
            raise IndefiniteHessianError(f"negative curvature {curvature!r} at CG iteration {k}")
        if curvature <= 0.0:
            # Numerically zero curvature: cannot make progress.
            return u, CGInfo(iterations=k, residual_norm=float(np.linalg.norm(r)), converged=False)
        alpha = rz / curvature
        u = u + alpha * p
        r = r - alpha * hp
        res_norm = float(np.linalg.norm(r))
        if res_norm <= target:
            return u, CGInfo(iterations=k + 1, residual_norm=res_norm, converged=True)
        z = precond(r) if precond is not None else r
        rz_next = float(np.sum(r * z))
        p = z + (rz_next / rz) * p
        rz = rz_next
    return u, CGInfo(iterations=max_iters, residual_norm=res_norm, converged=False)


def solve_hessian_system(x_star: np.ndarray, problem: TVProblem, rhs: np.ndarray,
                         cfg: BilevelConfig, x0: np.ndarray | None = None):
    """Solve H u = rhs where H is the inner Hessian at ``x_star``."""
    x_star = as_image(x_star, "x_star")
    rhs = as_image(rhs, "rhs")
    max_iters = cfg.cg_max_iters if cfg.cg_max_iters is not None else rhs.size
    u, info = conjugate_gradient(
        problem.hessian_operator(x_star), rhs, cfg.cg_tol, max_iters,
        precond=problem.hessian_preconditioner(x_star), x0=x0,
    )
    if not info.converged:
        logger.warning(
            "hessian CG stopped after %d iterations with residual %.3e",
            info.iterations, info.residual_norm,
        )
    return u, info


def minimizer_sensitivity(x_star: np.ndarray, problem: TVProblem, beta: float,
                          cfg: BilevelConfig, x0: np.ndarray | None = None):
    """dx*/dbeta at an (approximate) inner minimizer."""
    rhs = problem.dgrad_dlambda(x_star)
    u, info = solve_hessian_system(x_star, problem, rhs, cfg, x0=x0)
    return -lambda_from_beta(beta) * u, info


def gn_direction(values: np.ndarray, jacobian: np.ndarray) -> float:
    """Scalar Gauss-Newton direction -<J, rho> / <J, J>."""
    values = np.asarray(values, dtype=np.float64).ravel()
    jacobian = np.asarray(jacobian, dtype=np.float64).ravel()
    if values.shape != jacobian.shape:
        raise ValueError(f"residual/jacobian length mismatch {values.shape} vs {jacobian.shape}")
    jj = float(np.dot(jacobian, jacobian))
    if jj < VANISHING_JACOBIAN_FLOOR:
        raise VanishingJacobianError(f"squared jacobian norm {jj!r} below {VANISHING_JACOBIAN_FLOOR}")
    return -float(np.dot(jacobian, values)) / jj


def gauss_newton_scalar(evaluate, beta0: float, alpha: float, tol_d: float, max_it: int):
    """Damped scalar Gauss-Newton driver.

    ``evaluate(beta, iteration)`` returns the pair (residual values, jacobian
    values) at ``beta``.  The update beta <- beta + alpha*d always runs at
    least once; the stopping test |d| <= tol_d follows the update.  Returns
    (final beta, list of (beta, d, beta_next) per iteration, converged flag).
    """
    beta = float(beta0)
    steps: list[tuple[float, float, float]] = []
    converged = False
    for i in range(max_it):
        values, jacobian = evaluate(beta, i)
        d = gn_direction(values, jacobian)
        beta_next = beta + alpha * d
        steps.append((beta, d, beta_next))
        beta = beta_next
        if abs(d) <= tol_d:
            converged = True
            break
    return beta, steps, converged


def learn_lambda(y: np.ndarray, op: ConvOperator, kind: LossKind, huber_eps: float = 1e-3,
                 agd_cfg: AGDConfig | None = None, cfg: BilevelConfig | None = None,
                 record_callback=None) -> BilevelResult:
    """Learn the regularization weight for one observed image.

    Runs the damped Gauss-Newton loop on the chosen quality loss, with each
    inner TV solve warm started from the previous minimizer (the very first
    from ``y`` itself).  After the loop a final inner solve at the returned
    weight makes the reconstruction consistent with it.
    """
    y = as_image(y, "y")
    agd_cfg = agd_cfg or AGDConfig()
    cfg = cfg or BilevelConfig()

    state = {"x": y.copy(), "cg_warm": None}
    evaluations: list[tuple[int, float, float, float, int, int]] = []

    def evaluate(beta: float, iteration: int):
        lam = lambda_from_beta(beta)
        problem = TVProblem(op, y, lam, huber_eps)
        lower = nesterov_agd(problem, state["x"], agd_cfg)
        state["x"] = lower.minimizer
        rhs = problem.dgrad_dlambda(lower.minimizer)
        u, cg_info = solve_hessian_system(
            lower.minimizer, problem, rhs, cfg, x0=state["cg_warm"]
        )
        state["cg_warm"] = u
        sens = -lam * u
        lr = loss_residual(kind, lower.minimizer, op, y)
        jac = loss_residual_jacobian(kind, lower.minimizer, sens, op, y)
        evaluations.append(
            (iteration, beta, lam, loss_value(lr), lower.iterations, cg_info.iterations)
        )
        return lr.values, jac

    beta_hat, steps, converged = gauss_newton_scalar(
        evaluate, cfg.beta0, cfg.alpha, cfg.tol_d, cfg.max_it
    )
    trace: list[TraceRecord] = []
    for (iteration, beta_i, lam, q, lower_iters, cg_iters), (_, d_i, beta_next_i) in zip(
        evaluations, steps
    ):
        rec = TraceRecord(
            iteration=iteration, beta=beta_i, lam=lam, q=q, direction=d_i,
            beta_next=beta_next_i, lower_iterations=lower_iters, cg_iterations=cg_iters,
        )
        trace.append(rec)
        if record_callback is not None:
            record_callback(rec)

    lambda_hat = lambda_from_beta(beta_hat)
    final = nesterov_agd(TVProblem(op, y, lambda_hat, huber_eps), state["x"], agd_cfg)
    if not converged:
        logger.warning("outer loop hit max_it=%d with |d|=%.3e", cfg.max_it, abs(steps[-1][1]))
    return BilevelResult(
        lambda_hat=lambda_hat,
        minimizer=final.minimizer,
        trace=trace,
        converged=converged,
        final_lower=final,
    )
