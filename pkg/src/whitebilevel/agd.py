"""Nesterov accelerated gradient descent for the smoothed TV objective.

Fixed step size 1/L with L the objective's Lipschitz bound, standard
momentum recursion, and a relative step-norm stopping rule
||x_{t+1} - x_t|| <= tol * max(||x_t||, 1).  At least one iteration is
always performed; hitting the iteration cap is reported via the
``converged`` flag rather than raised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .image import as_image, check_same_shape
from .tv import TVProblem

__all__ = ["AGDConfig", "AGDResult", "DivergenceError", "nesterov_agd"]


class DivergenceError(RuntimeError):
    """Non-finite iterate encountered; signals a step-size or bound bug."""


@dataclass(frozen=True)
class AGDConfig:
    tol: float = 1e-6
    max_iters: int = 50_000

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class AGDResult:
    minimizer: np.ndarray
    iterations: int
    final_step_norm: float
    final_objective: float
    converged: bool


def nesterov_agd(problem: TVProblem, x0: np.ndarray, cfg: AGDConfig | None = None,
                 callback=None) -> AGDResult:
    """Minimize ``problem`` starting from ``x0``.

    ``callback(iteration, objective, step_norm)``, when given, is invoked once
    per iteration (the objective is only evaluated in that case).
    """
    cfg = cfg or AGDConfig()
    x = as_image(x0, "x0").copy()
    check_same_shape(x, problem.observed, "x0 and observed")
    tau = 1.0 / problem.lipschitz_bound()
    x_prev = x
    theta = 1.0
    step_norm = math.inf
    iterations = 0
    converged = False
    for t in range(cfg.max_iters):
        theta_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))
        z = x + ((theta - 1.0) / theta_next) * (x - x_prev)
        x_next = z - tau * problem.grad(z)
        step_norm = float(np.linalg.norm(x_next - x))
        if not math.isfinite(step_norm):
            raise DivergenceError(f"non-finite iterate at iteration {t}")
        x_scale = max(float(np.linalg.norm(x)), 1.0)
        x_prev, x, theta = x, x_next, theta_next
        iterations = t + 1
        if callback is not None:
            callback(t, problem.value(x), step_norm)
        if step_norm <= cfg.tol * x_scale:
            converged = True
            break
    return AGDResult(
        minimizer=x,
        iterations=iterations,
        final_step_norm=step_norm,
        final_objective=problem.value(x),
        converged=converged,
    )
