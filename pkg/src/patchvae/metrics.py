"""PSNR and SSIM on images in [-1, 1], measured on the [0, 1] mapped range."""

from __future__ import annotations

import math

import numpy as np

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
LUMA = np.array([0.299, 0.587, 0.114])


def to_unit(x) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def psnr(x, x_hat, cap: float = PSNR_CAP_DB) -> float:
    """10 log10(1 / MSE) in dB over all pixels; identical inputs give ``cap``."""
    a, b = to_unit(x), to_unit(x_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def gray(x) -> np.ndarray:
    """(..., H, W, 3) in [-1, 1] -> (..., H, W) luminance in [0, 1]."""
    return to_unit(x) @ LUMA


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation along the last two axes
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ g


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(x, x_hat) -> float:
    """Mean local SSIM of the luminance images, 11x11 Gaussian window (sigma 1.5), valid region.

    Accepts a single (H, W, 3) image or a (B, H, W, 3) batch; a batch is averaged.
    """
    a, b = gray(x), gray(x_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    return float(np.mean(ssim_map(a, b)))
