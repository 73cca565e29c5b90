"""Synthetic degradation: blur kernels and BSNR-calibrated white noise.

The noise level is specified through the blurred signal-to-noise ratio

    BSNR = 10 log10( ||b - mean(b)||^2 / ||b - y||^2 ),

where b is the blurred clean image and y the noisy observation, so the
injected standard deviation is sigma = ||b - mean(b)|| / (sqrt(m) 10^(BSNR/20)).
"""

from __future__ import annotations

import math

import numpy as np

from .image import as_image
from .operators import Kernel

__all__ = [
    "make_gaussian_kernel",
    "make_motion_kernel",
    "bsnr",
    "add_awgn_bsnr",
]


def make_gaussian_kernel(size: int, std: float) -> Kernel:
    """Normalized isotropic Gaussian blur kernel on an odd square support."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"size must be a positive odd integer, got {size}")
    if std <= 0:
        raise ValueError("std must be positive")
    half = size // 2
    idx = np.arange(size) - half
    sq = idx[:, None] ** 2 + idx[None, :] ** 2
    taps = np.exp(-sq / (2.0 * std * std))
    taps /= taps.sum()
    return Kernel(taps, (half, half), normalized=True)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # np.round ties to even, which would break the 180-degree symmetry of the
    # rasterized segment; round half away from zero instead.
    return np.trunc(x + np.copysign(0.5, x)).astype(int)


def make_motion_kernel(length: int, angle_deg: float) -> Kernel:
    """Linear motion blur: a centered segment rasterized with equal weights.

    ``length`` sample points along the segment are snapped to grid cells;
    every covered cell receives the same weight and the taps sum to one.
    """
    if length < 1:
        raise ValueError("length must be at least 1")
    theta = math.radians(angle_deg)
    ts = np.arange(length, dtype=np.float64) - (length - 1) / 2.0
    rows = _round_half_away(ts * math.sin(theta))
    cols = _round_half_away(ts * math.cos(theta))
    cells = sorted(set(zip(rows.tolist(), cols.tolist())))
    r0 = min(r for r, _ in cells + [(0, 0)])
    r1 = max(r for r, _ in cells + [(0, 0)])
    c0 = min(c for _, c in cells + [(0, 0)])
    c1 = max(c for _, c in cells + [(0, 0)])
    taps = np.zeros((r1 - r0 + 1, c1 - c0 + 1))
    w = 1.0 / len(cells)
    for r, c in cells:
        taps[r - r0, c - c0] = w
    return Kernel(taps, (-r0, -c0), normalized=True)


def bsnr(blurred_clean: np.ndarray, noisy: np.ndarray) -> float:
    """Blurred signal-to-noise ratio in dB of an observation."""
    b = as_image(blurred_clean, "blurred_clean")
    y = as_image(noisy, "noisy")
    if b.shape != y.shape:
        raise ValueError(f"shape mismatch {b.shape} vs {y.shape}")
    signal = float(np.sum((b - b.mean()) ** 2))
    noise = float(np.sum((b - y) ** 2))
    if noise == 0.0:
        raise ValueError("zero noise energy: BSNR is undefined")
    return 10.0 * math.log10(signal / noise)


def add_awgn_bsnr(blurred_clean: np.ndarray, target_bsnr: float, seed: int):
    """Add white Gaussian noise calibrated to the target BSNR.

    Returns (noisy image, sigma actually used).  The generator is
    ``numpy.random.default_rng(seed)``, so a fixed seed gives a fixed image.
    """
    b = as_image(blurred_clean, "blurred_clean")
    signal = float(np.sum((b - b.mean()) ** 2))
    if signal == 0.0:
        raise ValueError("constant image: BSNR calibration is undefined")
    m = b.size
    sigma = math.sqrt(signal) / (math.sqrt(m) * 10.0 ** (target_bsnr / 20.0))
    rng = np.random.default_rng(seed)
    noisy = b + sigma * rng.standard_normal(b.shape)
    return noisy, sigma
