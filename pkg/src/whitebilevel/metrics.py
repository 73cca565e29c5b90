"""Reconstruction quality metrics: PSNR and SSIM.

Both are reporting metrics only.  SSIM follows the standard single-scale
definition: 11x11 Gaussian window with sigma 1.5, stabilizers K1 = 0.01 and
K2 = 0.03, dynamic range 1.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import convolve2d

from .image import as_image, check_same_shape

__all__ = ["psnr", "ssim", "PSNR_CAP_DB"]

PSNR_CAP_DB = 99.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB."""
    x = as_image(x, "x")
    ref = as_image(ref, "ref")
    check_same_shape(x, ref)
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP_DB)


def _ssim_window() -> np.ndarray:
    half = _SSIM_WINDOW // 2
    idx = np.arange(_SSIM_WINDOW) - half
    g = np.exp(-(idx[:, None] ** 2 + idx[None, :] ** 2) / (2.0 * _SSIM_SIGMA**2))
    return g / g.sum()


def ssim(x: np.ndarray, ref: np.ndarray) -> float:
    """Mean local structural similarity over valid 11x11 windows."""
    x = as_image(x, "x")
    ref = as_image(ref, "ref")
    check_same_shape(x, ref)
    if min(x.shape) < _SSIM_WINDOW:
        raise ValueError(f"images smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} SSIM window")
    w = _ssim_window()
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    mu_x = convolve2d(x, w, mode="valid")
    mu_y = convolve2d(ref, w, mode="valid")
    var_x = convolve2d(x * x, w, mode="valid") - mu_x**2
    var_y = convolve2d(ref * ref, w, mode="valid") - mu_y**2
    cov = convolve2d(x * ref, w, mode="valid") - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))
