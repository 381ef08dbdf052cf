"""Image-quality metrics on magnitude images."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = ["PSNR_CAP", "MetricPair", "psnr", "ssim", "evaluate"]

PSNR_CAP = 99.0


def _check(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs reference {ref.shape}")
    if not np.any(ref):
        raise ValueError("reference image is identically zero")
    return x, ref


def psnr(x, ref) -> float:
    """PSNR in dB against the reference peak; exact matches report ``PSNR_CAP``."""
    x, ref = _check(x, ref)
    mse = np.mean((x - ref) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10 * np.log10(np.max(np.abs(ref)) ** 2 / mse), PSNR_CAP))


def ssim(x, ref, sigma: float = 1.5) -> float:
    """Mean SSIM with a 7x7 Gaussian window and the reference's dynamic range."""
    x, ref = _check(x, ref)
    data_range = ref.max() - ref.min()
    if data_range == 0:
        data_range = np.abs(ref).max()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def blur(img):
        return gaussian_filter(img, sigma, truncate=2.0, mode="reflect")

    mu_x, mu_r = blur(x), blur(ref)
    var_x = blur(x * x) - mu_x**2
    var_r = blur(ref * ref) - mu_r**2
    cov = blur(x * ref) - mu_x * mu_r
    num = (2 * mu_x * mu_r + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_r**2 + c1) * (var_x + var_r + c2)
    return float(np.mean(num / den))


class MetricPair(NamedTuple):
    psnr: float
    ssim: float


def evaluate(x, ref) -> MetricPair:
    return MetricPair(psnr(x, ref), ssim(x, ref))
