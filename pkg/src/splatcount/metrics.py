"""Image comparison metrics for renders in [0, 1]: PSNR (capped) and SSIM
with an 11x11 Gaussian window over valid positions only."""

from __future__ import annotations

import numpy as np

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("images contain non-finite values")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images.

    Identical images return the 99 dB cap rather than infinity.
    """
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_kernel_1d():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _windowed_mean(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode windowed mean of a 2-D image."""
    rows = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"),
                               1, img)
    return np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"),
                               0, rows)


def _ssim_channel(a, b) -> float:
    k = _gaussian_kernel_1d()
    mu_a = _windowed_mean(a, k)
    mu_b = _windowed_mean(b, k)
    aa = _windowed_mean(a * a, k) - mu_a * mu_a
    bb = _windowed_mean(b * b, k) - mu_b * mu_b
    ab = _windowed_mean(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _C1) * (2 * ab + _C2)
    den = (mu_a ** 2 + mu_b ** 2 + _C1) * (aa + bb + _C2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean SSIM with a Gaussian 11x11 window (sigma 1.5), averaging only
    window positions fully inside the image; multichannel images average
    the per-channel scores."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W) or (H, W, C) images, got shape "
                         f"{a.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least "
                         f"{SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    return float(np.mean([_ssim_channel(a[:, :, c], b[:, :, c])
                          for c in range(a.shape[2])]))
