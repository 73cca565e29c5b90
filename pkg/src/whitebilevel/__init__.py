"""Bilevel learning of TV deconvolution regularization weights.

A library and CLI that pick the scalar regularization weight of
Huber-smoothed TV image deconvolution by gradient-based bilevel
optimization.  Three quality losses are supported: supervised MSE against
a ground truth, a semi-supervised residual-energy (discrepancy) loss that
only needs the noise level, and an unsupervised residual-whiteness loss
that needs nothing beyond the observation and the blur model.
"""

from .agd import AGDConfig, AGDResult, DivergenceError, nesterov_agd
from .bilevel import (
    BilevelConfig,
    BilevelResult,
    IndefiniteHessianError,
    TraceRecord,
    VanishingJacobianError,
    gn_direction,
    lambda_from_beta,
    learn_lambda,
)
from .config import ConfigError, ExperimentConfig, GridSpec, KernelSpec, load_config
from .degrade import add_awgn_bsnr, bsnr, make_gaussian_kernel, make_motion_kernel
from .image import read_pgm, read_raw, write_pgm, write_raw
from .losses import (
    DegenerateResidualError,
    GaussLoss,
    LossResidual,
    MseLoss,
    WhiteLoss,
    loss_residual,
    loss_residual_jacobian,
    loss_value,
    residual,
)
from .metrics import psnr, ssim
from .operators import (
    ConvOperator,
    Kernel,
    cross_correlate,
    gradient_adjoint,
    identity_kernel,
    image_gradient,
)
from .synth import synthetic_batch, synthetic_image
from .tv import TVProblem, huber_grad, huber_hess, huber_total, huber_value

__version__ = "0.1.0"

__all__ = [
    "AGDConfig", "AGDResult", "DivergenceError", "nesterov_agd",
    "BilevelConfig", "BilevelResult", "TraceRecord", "IndefiniteHessianError",
    "VanishingJacobianError", "gn_direction", "lambda_from_beta", "learn_lambda",
    "ConfigError", "ExperimentConfig", "GridSpec", "KernelSpec", "load_config",
    "add_awgn_bsnr", "bsnr", "make_gaussian_kernel", "make_motion_kernel",
    "read_pgm", "read_raw", "write_pgm", "write_raw",
    "DegenerateResidualError", "GaussLoss", "LossResidual", "MseLoss", "WhiteLoss",
    "loss_residual", "loss_residual_jacobian", "loss_value", "residual",
    "psnr", "ssim",
    "ConvOperator", "Kernel", "cross_correlate", "gradient_adjoint",
    "identity_kernel", "image_gradient",
    "synthetic_batch", "synthetic_image",
    "TVProblem", "huber_grad", "huber_hess", "huber_total", "huber_value",
]
