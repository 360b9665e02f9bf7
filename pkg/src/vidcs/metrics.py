"""Fidelity metrics on pixel-domain planes."""

from __future__ import annotations

import numpy as np
from scipy.signal import fftconvolve

from .errors import GeometryError, ShapeError
from .sensing import FramePlane

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, FramePlane) else np.asarray(x, dtype=np.float64)


def psnr(a, b, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    av, bv = _values(a), _values(b)
    if av.shape != bv.shape:
        raise ShapeError(f"psnr: shape {av.shape} vs {bv.shape}")
    err = float(np.mean((av - bv) ** 2))
    if err == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / err)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b, peak: float = 255.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window, sigma 1.5."""
    av, bv = _values(a), _values(b)
    if av.shape != bv.shape:
        raise ShapeError(f"ssim: shape {av.shape} vs {bv.shape}")
    if min(av.shape) < _SSIM_WINDOW:
        raise GeometryError(
            f"ssim needs frames of at least {_SSIM_WINDOW}x{_SSIM_WINDOW}, got {av.shape}"
        )
    win = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def smooth(x):
        return fftconvolve(x, win, mode="valid")

    mu_a = smooth(av)
    mu_b = smooth(bv)
    var_a = smooth(av * av) - mu_a * mu_a
    var_b = smooth(bv * bv) - mu_b * mu_b
    cov = smooth(av * bv) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
