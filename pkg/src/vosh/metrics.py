"""Image quality metrics: PSNR and single-scale SSIM."""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

from .errors import InvalidArgumentError

PSNR_CAP = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pixels(img) -> np.ndarray:
    if hasattr(img, "pixels"):
        img = img.pixels
    return np.asarray(img, dtype=np.float64)


def psnr(a, b) -> float:
    """10 log10(1 / MSE) over [0, 1] RGB, capped at 99 dB."""
    a = _pixels(a)
    b = _pixels(b)
    if a.shape != b.shape:
        raise InvalidArgumentError("psnr: image dimensions differ")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    g /= g.sum()
    return g


def _filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = convolve2d(img, g[None, :], mode="valid")
    return convolve2d(out, g[:, None], mode="valid")


def ssim(a, b) -> float:
    """Standard single-scale SSIM: 11x11 Gaussian window, sigma 1.5,
    k1=0.01 / k2=0.03, unit data range, averaged over channels."""
    a = _pixels(a)
    b = _pixels(b)
    if a.shape != b.shape:
        raise InvalidArgumentError("ssim: image dimensions differ")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise InvalidArgumentError(f"ssim: images must be at least {SSIM_WINDOW} px per side")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    g = _gaussian_kernel()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    scores = []
    for c in range(a.shape[2]):
        x = a[..., c]
        y = b[..., c]
        mu_x = _filter(x, g)
        mu_y = _filter(y, g)
        xx = _filter(x * x, g) - mu_x**2
        yy = _filter(y * y, g) - mu_y**2
        xy = _filter(x * y, g) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
