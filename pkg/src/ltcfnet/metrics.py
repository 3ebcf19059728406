"""Evaluation metrics on plain numpy images in [0, 1]."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeError
from .losses import gaussian_window

PSNR_CAP = 80.0
MSE_FLOOR = 1e-8


def psnr(pred, target) -> float:
    """20 log10(1 / sqrt(MSE)); ``PSNR_CAP`` when MSE is below 1e-8."""
    pred, target = np.asarray(pred, np.float64), np.asarray(target, np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"psnr inputs differ in shape: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return float(-10.0 * np.log10(mse))


def ssim(pred, target, window=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2) -> float:
    """Mean local SSIM over valid Gaussian windows, averaged across channels."""
    x, y = np.asarray(pred, np.float64), np.asarray(target, np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"ssim inputs differ in shape: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if min(x.shape[:2]) < window:
        raise ShapeError(f"image {x.shape[:2]} smaller than the {window}x{window} SSIM window")
    g = gaussian_window(window, sigma)
    r = window // 2

    def blur(a):
        a = correlate1d(a, g, axis=0, mode="constant")
        a = correlate1d(a, g, axis=1, mode="constant")
        return a[r:a.shape[0] - r, r:a.shape[1] - r]

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cov = blur(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())
