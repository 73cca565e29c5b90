"""Periodic convolution operators, discrete gradients, circular cross-correlation.

Everything here uses circular (periodic) boundary conditions, which makes the
blur operator diagonal in the DFT basis: applications cost two FFTs, the
spectral norm is exact, and the cross-correlation needed by the whiteness
loss is a frequency-domain product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .image import as_image, check_same_shape

__all__ = [
    "Kernel",
    "ConvOperator",
    "identity_kernel",
    "image_gradient",
    "gradient_adjoint",
    "cross_correlate",
]


@dataclass(frozen=True, eq=False)
class Kernel:
    """A small convolution kernel: 2-D taps plus the anchor (center) index.

    ``normalized`` marks a blur kernel whose taps are nonnegative and sum to
    one; this guarantees unit DC gain, hence spectral norm one for the
    periodic operator built from it.
    """

    taps: np.ndarray
    anchor: tuple[int, int]
    normalized: bool = False

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.size == 0:
            raise ValueError("kernel taps must be a non-empty 2-D array")
        if not np.all(np.isfinite(taps)):
            raise ValueError("kernel taps must be finite")
        ai, aj = self.anchor
        if not (0 <= ai < taps.shape[0] and 0 <= aj < taps.shape[1]):
            raise ValueError(f"anchor {self.anchor} outside kernel support {taps.shape}")
        if self.normalized:
            if taps.min() < 0.0:
                raise ValueError("normalized blur kernel must be nonnegative")
            if abs(taps.sum() - 1.0) > 1e-12:
                raise ValueError(f"normalized kernel sums to {taps.sum()!r}, not 1")
        object.__setattr__(self, "taps", taps)

    def reversed(self) -> "Kernel":
        """Spatially reversed kernel (the impulse response of the adjoint)."""
        taps = self.taps[::-1, ::-1].copy()
        h, w = taps.shape
        ai, aj = self.anchor
        return Kernel(taps, (h - 1 - ai, w - 1 - aj), self.normalized)


def identity_kernel() -> Kernel:
    return Kernel(np.ones((1, 1)), (0, 0), normalized=True)


class ConvOperator:
    """Periodic convolution with a fixed kernel on a fixed grid.

    The transfer function (2-D DFT of the kernel embedded with its anchor at
    pixel (0, 0)) is precomputed once; the operator is immutable afterwards
    and safe to share across threads.
    """

    def __init__(self, kernel: Kernel, shape: tuple[int, int]):
        h, w = int(shape[0]), int(shape[1])
        if h <= 0 or w <= 0:
            raise ValueError(f"invalid operator shape {shape}")
        self.kernel = kernel
        self.shape = (h, w)
        embedded = np.zeros((h, w))
        ai, aj = kernel.anchor
        kh, kw = kernel.taps.shape
        rows = (np.arange(kh) - ai) % h
        cols = (np.arange(kw) - aj) % w
        # += accumulates wrap-around overlaps, which is the correct periodic
        # embedding even when the kernel support exceeds the grid.
        np.add.at(embedded, (rows[:, None], cols[None, :]), kernel.taps)
        self.transfer = np.fft.fft2(embedded)
        # Real-input transforms halve the FFT work; for a real kernel the
        # half-plane spectrum carries the full operator.
        self._transfer_r = np.fft.rfft2(embedded)
        self._transfer_r_conj = np.conj(self._transfer_r)

    @property
    def norm_sq(self) -> float:
        """Squared spectral norm: max over frequencies of |transfer|^2."""
        return float(np.max(np.abs(self.transfer) ** 2))

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = as_image(x)
        if x.shape != self.shape:
            raise ValueError(f"image shape {x.shape} does not match operator {self.shape}")
        return x

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Circular convolution of ``x`` with the kernel."""
        x = self._check(x)
        return np.fft.irfft2(self._transfer_r * np.fft.rfft2(x), s=self.shape)

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        """Adjoint application: circular convolution with the reversed kernel."""
        r = self._check(r)
        return np.fft.irfft2(self._transfer_r_conj * np.fft.rfft2(r), s=self.shape)


def image_gradient(x: np.ndarray) -> np.ndarray:
    """Forward-difference gradient with periodic wrap.

    Returns a (2, H, W) array: plane 0 holds horizontal differences
    (right neighbor minus pixel), plane 1 vertical ones (below minus pixel).
    """
    x = as_image(x)
    g = np.empty((2,) + x.shape)
    g[0, :, :-1] = x[:, 1:]
    g[0, :, -1] = x[:, 0]
    g[0] -= x
    g[1, :-1, :] = x[1:, :]
    g[1, -1, :] = x[0, :]
    g[1] -= x
    return g


def gradient_adjoint(g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`image_gradient` (negative periodic divergence)."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 3 or g.shape[0] != 2:
        raise ValueError(f"gradient field must have shape (2, H, W), got {g.shape}")
    h, v = g[0], g[1]
    out = np.empty_like(h)
    out[:, 1:] = h[:, :-1]
    out[:, 0] = h[:, -1]
    out -= h
    out[1:, :] += v[:-1, :]
    out[0, :] += v[-1, :]
    out -= v
    return out


def cross_correlate(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Discrete circular cross-correlation of two same-sized images.

    out[j1, j2] = sum_k x1[k1, k2] * x2[(j1+k1) mod H, (j2+k2) mod W],
    evaluated as the inverse DFT of conj(X1) * X2.
    """
    x1 = as_image(x1, "x1")
    x2 = as_image(x2, "x2")
    check_same_shape(x1, x2)
    return np.fft.ifft2(np.conj(np.fft.fft2(x1)) * np.fft.fft2(x2)).real
