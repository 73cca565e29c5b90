"""Upper-level quality losses in residual form.

Each loss is written as 0.5*||rho||^2 for a loss-specific vector rho of the
reconstruction, so a Gauss-Newton upper solver can treat all three
uniformly:

* MSE (supervised): rho = x - reference, an n-vector.
* GAUSS (semi-supervised): rho is the scalar ||A x - y||^2 - m*sigma^2,
  the gap between residual energy and the expected noise energy.
* WHITE (unsupervised): rho is the circular autocorrelation of the residual
  normalized by its energy, an m-vector; white residuals make it close to a
  unit impulse.  The normalization removes any dependence on the noise
  level, so no side information is needed at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import as_image, check_same_shape
from .operators import ConvOperator, cross_correlate

__all__ = [
    "MseLoss",
    "GaussLoss",
    "WhiteLoss",
    "LossResidual",
    "DegenerateResidualError",
    "residual",
    "loss_residual",
    "loss_value",
    "loss_residual_jacobian",
]

# Below this residual energy the whiteness normalization is meaningless.
DEGENERATE_RESIDUAL_FLOOR = 1e-300


class DegenerateResidualError(ValueError):
    """Residual energy at the underflow floor; whiteness is undefined."""


@dataclass(frozen=True, eq=False)
class MseLoss:
    """Supervised loss: squared distance to a known reference image."""

    reference: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "reference", as_image(self.reference, "reference"))


@dataclass(frozen=True)
class GaussLoss:
    """Semi-supervised loss: residual energy should match m*sigma^2."""

    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class WhiteLoss:
    """Unsupervised loss: penalize structure in the residual autocorrelation."""


LossKind = MseLoss | GaussLoss | WhiteLoss


@dataclass
class LossResidual:
    """The loss written as 0.5*||values||^2, tagged with its kind."""

    values: np.ndarray
    kind: LossKind


def residual(x: np.ndarray, op: ConvOperator, y: np.ndarray) -> np.ndarray:
    """Data residual A x - y."""
    x = as_image(x, "x")
    y = as_image(y, "y")
    check_same_shape(x, y)
    return op.apply(x) - y


def _normalized_autocorr(r: np.ndarray) -> np.ndarray:
    energy = float(np.sum(r * r))
    if energy < DEGENERATE_RESIDUAL_FLOOR:
        raise DegenerateResidualError(
            f"residual energy {energy!r} is below {DEGENERATE_RESIDUAL_FLOOR}"
        )
    return cross_correlate(r, r) / energy


def loss_residual(kind: LossKind, x: np.ndarray, op: ConvOperator, y: np.ndarray) -> LossResidual:
    """Evaluate the residual-form vector of the given loss at ``x``."""
    if isinstance(kind, MseLoss):
        x = as_image(x, "x")
        check_same_shape(x, kind.reference, "x and reference")
        values = (x - kind.reference).ravel()
    elif isinstance(kind, GaussLoss):
        r = residual(x, op, y)
        m = r.size
        values = np.array([np.sum(r * r) - m * kind.sigma**2])
    elif isinstance(kind, WhiteLoss):
        r = residual(x, op, y)
        values = _normalized_autocorr(r).ravel()
    else:
        raise TypeError(f"unknown loss kind {kind!r}")
    return LossResidual(values=values, kind=kind)


def loss_value(lr: LossResidual) -> float:
    """Loss value 0.5*||values||^2."""
    v = lr.values
    return float(0.5 * np.dot(v, v))


def loss_residual_jacobian(kind: LossKind, x_star: np.ndarray, dx_dbeta: np.ndarray,
                           op: ConvOperator, y: np.ndarray) -> np.ndarray:
    """Directional derivative of the residual-form vector along the
    log-parameter, given the minimizer sensitivity ``dx_dbeta``.

    For GAUSS and WHITE the chain passes through the data residual, whose
    derivative is delta = A dx_dbeta.  The WHITE case differentiates the
    normalized autocorrelation with the quotient rule; both correlation
    orders appear because cross-correlation is not commutative.
    """
    dx_dbeta = as_image(dx_dbeta, "dx_dbeta")
    if isinstance(kind, MseLoss):
        return dx_dbeta.ravel().copy()
    r = residual(x_star, op, y)
    delta = op.apply(dx_dbeta)
    if isinstance(kind, GaussLoss):
        return np.array([2.0 * np.sum(r * delta)])
    if isinstance(kind, WhiteLoss):
        energy = float(np.sum(r * r))
        if energy < DEGENERATE_RESIDUAL_FLOOR:
            raise DegenerateResidualError(
                f"residual energy {energy!r} is below {DEGENERATE_RESIDUAL_FLOOR}"
            )
        corr_deriv = cross_correlate(delta, r) + cross_correlate(r, delta)
        energy_deriv = 2.0 * float(np.sum(r * delta))
        jac = corr_deriv / energy - (energy_deriv / energy**2) * cross_correlate(r, r)
        return jac.ravel()
    raise TypeError(f"unknown loss kind {kind!r}")
