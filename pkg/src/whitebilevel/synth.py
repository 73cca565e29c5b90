"""Deterministic synthetic grayscale test images.

Each image mixes a smooth band-limited random background and a faint fine
texture with a few piecewise-constant shapes (rectangles, disks).  All
components are periodic across the image borders, matching the circular
boundary model of the blur operator, and the dense structure keeps the
residual statistics close to those of natural images.  The same
(size, seed) pair always yields the same image.
"""

from __future__ import annotations

import numpy as np

__all__ = ["synthetic_image", "synthetic_batch"]


def _periodic_field(rng, size: int, amplitude) -> np.ndarray:
    """Zero-mean unit-variance random field with the given spectral amplitude."""
    w = rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))
    z = np.fft.ifft2(w * amplitude).real
    return (z - z.mean()) / max(z.std(), 1e-12)


def synthetic_image(size: int, seed: int) -> np.ndarray:
    """One size x size image in [0, 1], deterministic in ``seed``."""
    if size < 16:
        raise ValueError("size must be at least 16")
    rng = np.random.default_rng(seed)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    fi = np.fft.fftfreq(size)[:, None] * size
    fj = np.fft.fftfreq(size)[None, :] * size
    rad_sq = fi**2 + fj**2

    smooth = _periodic_field(rng, size, 1.0 / (1.0 + rad_sq / 9.0) ** 1.5)
    texture = _periodic_field(rng, size, ((rad_sq >= 9.0) & (rad_sq <= 100.0)).astype(float))
    img = 0.45 + 0.12 * smooth + 0.025 * texture

    for _ in range(int(rng.integers(2, 4))):
        ci, cj = rng.uniform(0.25, 0.75, size=2) * size
        hi, hj = rng.uniform(0.06, 0.16, size=2) * size
        level = rng.uniform(0.15, 0.85)
        box = (np.abs(ii - ci) <= hi) & (np.abs(jj - cj) <= hj)
        img = np.where(box, 0.2 * img + 0.8 * level, img)

    for _ in range(int(rng.integers(2, 4))):
        ci, cj = rng.uniform(0.25, 0.75, size=2) * size
        rad = rng.uniform(0.05, 0.13) * size
        level = rng.uniform(0.15, 0.85)
        disk = (ii - ci) ** 2 + (jj - cj) ** 2 <= rad**2
        img = np.where(disk, 0.2 * img + 0.8 * level, img)

    return np.clip(img, 0.02, 0.98)


def synthetic_batch(count: int, size: int, seed: int) -> list[np.ndarray]:
    """A list of ``count`` distinct deterministic images."""
    return [synthetic_image(size, seed + 1000 * k) for k in range(count)]
