"""Pixel- and perception-level training losses and their weighted sum.

Images are NxHxWxC tensors in [0, 1] (HxWxC is promoted to a batch of one).
Terms that aggregate per image average over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import core
from .core import Tensor
from .errors import ShapeError
from .nn import Conv2d, Module

PSNR_MSE_FLOOR = 1e-8


@dataclass
class LossWeights:
    alpha1: float = 0.12   # PSNR
    alpha2: float = 0.05   # color
    alpha3: float = 0.55   # histogram
    alpha4: float = 0.015  # perceptual
    alpha5: float = 0.25   # SSIM
    psnr_cap: float = 40.0
    hist_bins: int = 256
    hist_bandwidth: float | None = None  # defaults to 2 / hist_bins
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    perceptual_layer_weights: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])

    def __post_init__(self):
        if min(self.alphas) < 0:
            raise ValueError(f"loss weights must be non-negative: {self.alphas}")
        if self.hist_bins < 2:
            raise ValueError("hist_bins must be >= 2")
        if self.hist_bandwidth is None:
            self.hist_bandwidth = 2.0 / self.hist_bins

    @property
    def alphas(self):
        return (self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.alpha5)

    @classmethod
    def from_alphas(cls, alphas, **kw):
        a1, a2, a3, a4, a5 = alphas
        return cls(a1, a2, a3, a4, a5, **kw)


def _batch(x):
    x = core.as_tensor(x)
    return core._promote4(x)[0]


def _check(y_true, y_pred):
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"loss inputs differ in shape: {y_true.shape} vs {y_pred.shape}")


def smooth_l1(y_true, y_pred) -> Tensor:
    """Mean of 0.5 d^2 (|d| < 1) or |d| - 0.5 over all elements."""
    y_true, y_pred = core.as_tensor(y_true), core.as_tensor(y_pred)
    _check(y_true, y_pred)
    d = y_true - y_pred

    def fn(v):
        a = np.abs(v)
        return np.where(a < 1.0, 0.5 * v * v, a - 0.5)

    def dfn(v, _):
        return np.where(np.abs(v) < 1.0, v, np.sign(v))
    return core.unary(d, fn, dfn).mean()


def mse_per_image(y_true, y_pred) -> Tensor:
    t, p = _batch(y_true), _batch(y_pred)
    _check(t, p)
    d = t - p
    return (d * d).mean(axis=(1, 2, 3))


def psnr_loss(y_true, y_pred, cap=40.0) -> Tensor:
    """``cap`` minus the batch-mean PSNR, with MSE floored at 1e-8."""
    mse = core.clamp(mse_per_image(y_true, y_pred), lo=PSNR_MSE_FLOOR)
    psnr = core.log(mse) * (-10.0 / np.log(10.0))
    return cap - psnr.mean()


def color_loss(y_true, y_pred) -> Tensor:
    """Sum over channels of |mean(true) - mean(pred)|, averaged over the batch."""
    t, p = _batch(y_true), _batch(y_pred)
    _check(t, p)
    diff = t.mean(axis=(1, 2)) - p.mean(axis=(1, 2))
    return core.tabs(diff).sum(axis=-1).mean()


def soft_histogram(x: Tensor, bins=256, bandwidth=None) -> Tensor:
    """Differentiable per-image, per-channel histogram, normalized to sum 1.

    Each value v adds exp(-((v - c_n) / bandwidth)^2) to bin n, where
    c_n = (n + 0.5) / bins.  The kernel is truncated at 4 bandwidths
    (relative weight e^-16).  Returns N x C x bins.
    """
    x = _batch(x)
    bandwidth = bandwidth or 2.0 / bins
    xd = x.data
    n, h, w, c = xd.shape
    v = xd.transpose(0, 3, 1, 2).reshape(n * c, h * w)
    radius = int(np.ceil(4.0 * bandwidth * bins))
    # bin index from a sanitized copy; non-finite values still poison the taps
    base = np.floor(np.clip(np.nan_to_num(v), -1.0, 2.0) * bins).astype(np.int64)
    rows = np.arange(n * c)[:, None] * bins
    mass = np.zeros(n * c * bins, dtype=np.float64)
    taps = []
    for off in range(-radius, radius + 1):
        idx = base + off
        ok = (idx >= 0) & (idx < bins)
        u = (v - (idx + 0.5) / bins) / bandwidth
        k = np.where(ok, np.exp(-u * u), 0.0)
        flat = np.where(ok, rows + idx, 0)
        mass += np.bincount(flat.ravel(), weights=k.ravel(), minlength=mass.size)
        taps.append((flat, k, u))
    mass = mass.reshape(n * c, bins)
    total = mass.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        hist = mass / total

    def bw(g):
        g = g.reshape(n * c, bins)
        g_mass = ((g - (g * hist).sum(axis=1, keepdims=True)) / total).ravel()
        gv = np.zeros_like(v, dtype=np.float64)
        for flat, k, u in taps:
            gv += g_mass[flat] * k * (-2.0 * u / bandwidth)
        return (gv.reshape(n, c, h, w).transpose(0, 2, 3, 1).astype(xd.dtype),)

    return core._make(hist.reshape(n, c, bins).astype(xd.dtype), (x,), bw)


def hist_loss(y_true, y_pred, bins=256, bandwidth=None) -> Tensor:
    """Per channel, the bin-averaged absolute difference of soft histograms;
    summed over channels and averaged over the batch."""
    t, p = _batch(y_true), _batch(y_pred)
    _check(t, p)
    with core.no_grad():
        ht = soft_histogram(t.detach(), bins, bandwidth)
    hp = soft_histogram(p, bins, bandwidth)
    return core.tabs(hp - ht).mean(axis=-1).sum(axis=-1).mean()


def hard_histogram(x: np.ndarray, bins=256) -> np.ndarray:
    """Counting histogram per channel (metrics only), normalized to sum 1."""
    x = np.asarray(x).reshape(-1, np.asarray(x).shape[-1])
    out = np.stack([np.histogram(x[:, ch], bins=bins, range=(0.0, 1.0))[0] for ch in range(x.shape[1])])
    return out / out.sum(axis=1, keepdims=True)


class WeightSource(str, Enum):
    SEEDED_RANDOM = "seeded_random"
    FILE = "file"


class FeatureExtractor(Module):
    """Frozen stack of stride-2 3x3 conv + ReLU stages; ``features`` returns
    the activation of every stage."""

    def __init__(self, widths=(16, 32, 64, 64), seed=1234, in_channels=3):
        rng = np.random.default_rng(seed)
        self.source = WeightSource.SEEDED_RANDOM
        self.widths = tuple(widths)
        self.in_channels = in_channels
        chans = (in_channels,) + self.widths
        self.stages = [Conv2d(chans[i], chans[i + 1], stride=2, rng=rng) for i in range(len(self.widths))]
        for name, p in self.named_parameters():
            p.name = name
            p.requires_grad = False

    @classmethod
    def from_file(cls, path, widths=(16, 32, 64, 64)):
        from .checkpoint import read_tensors
        _, tensors = read_tensors(path)
        ext = cls(widths)
        ext.load_tensors(tensors)
        ext.source = WeightSource.FILE
        return ext

    def load_tensors(self, tensors):
        from .checkpoint import assign_tensors
        assign_tensors(dict(self.named_parameters()), tensors)
        for p in self.parameters():
            p.requires_grad = False

    def features(self, x):
        x = _batch(x)
        if x.shape[-1] != self.in_channels:
            raise ShapeError(f"extractor expects {self.in_channels} channels, got {x.shape[-1]}")
        if min(x.shape[1], x.shape[2]) < 2 ** len(self.stages):
            raise ShapeError(f"extractor needs sides >= {2 ** len(self.stages)}, got {x.shape[1:3]}")
        feats = []
        for conv in self.stages:
            x = core.relu(conv(x))
            feats.append(x)
        return feats

    def forward(self, x):
        return self.features(x)


def perceptual_loss(extractor: FeatureExtractor, y_true, y_pred, layer_weights=None) -> Tensor:
    """Weighted sum over stages of ||phi(true) - phi(pred)||^2 / (C H W), batch-averaged."""
    t, p = _batch(y_true), _batch(y_pred)
    _check(t, p)
    with core.no_grad():
        ft = extractor.features(t.detach())
    fp = extractor.features(p)
    weights = layer_weights or [1.0] * len(fp)
    total = None
    for w, a, b in zip(weights, ft, fp):
        if w == 0:
            continue
        d = b - a
        term = (d * d).mean(axis=(1, 2, 3)).mean() * w
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0, dtype=p.dtype)


def gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _valid_filter_matrix(n, kernel):
    k = len(kernel)
    m = np.zeros((n - k + 1, n))
    for i in range(n - k + 1):
        m[i, i:i + k] = kernel
    return m


def ssim_map(y, y_hat, window=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2) -> Tensor:
    """Local SSIM over every full window position (no padding), NxH'xW'xC."""
    y, y_hat = _batch(y), _batch(y_hat)
    _check(y, y_hat)
    h, w = y.shape[1], y.shape[2]
    if h < window or w < window:
        raise ShapeError(f"image {h}x{w} smaller than the {window}x{window} SSIM window")
    g = gaussian_window(window, sigma)
    mh, mw = _valid_filter_matrix(h, g), _valid_filter_matrix(w, g)

    def blur(t):
        return core.spatial_linear(t, mh, mw)

    mu_y, mu_h = blur(y), blur(y_hat)
    var_y = blur(y * y) - mu_y * mu_y
    var_h = blur(y_hat * y_hat) - mu_h * mu_h
    cov = blur(y * y_hat) - mu_y * mu_h
    num = (2.0 * mu_y * mu_h + c1) * (2.0 * cov + c2)
    den = (mu_y * mu_y + mu_h * mu_h + c1) * (var_y + var_h + c2)
    return num / den


def ssim_loss(y_true, y_pred, weights: LossWeights | None = None) -> Tensor:
    lw = weights or LossWeights()
    s = ssim_map(y_true, y_pred, lw.ssim_window, lw.ssim_sigma, lw.ssim_c1, lw.ssim_c2)
    return 1.0 - s.mean()


TERM_NAMES = ("smooth_l1", "psnr", "color", "hist", "perceptual", "ssim")


def total_loss(weights: LossWeights, extractor: FeatureExtractor, y_true, y_pred):
    """Weighted six-term loss.  Returns (scalar tensor, {term: float})."""
    y_true, y_pred = _batch(y_true), _batch(y_pred)
    terms = {
        "smooth_l1": smooth_l1(y_true, y_pred),
        "psnr": psnr_loss(y_true, y_pred, weights.psnr_cap),
        "color": color_loss(y_true, y_pred),
        "hist": hist_loss(y_true, y_pred, weights.hist_bins, weights.hist_bandwidth),
        "perceptual": perceptual_loss(extractor, y_true, y_pred, weights.perceptual_layer_weights),
        "ssim": ssim_loss(y_true, y_pred, weights),
    }
    coeffs = dict(zip(TERM_NAMES, (1.0,) + weights.alphas))
    total = terms["smooth_l1"]
    for name in TERM_NAMES[1:]:
        if coeffs[name]:
            total = total + terms[name] * coeffs[name]
    return total, {name: t.item() for name, t in terms.items()}


def combine(weights: LossWeights, breakdown: dict) -> float:
    """Recompute the weighted total from a breakdown of term values."""
    coeffs = dict(zip(TERM_NAMES, (1.0,) + weights.alphas))
    return float(sum(coeffs[k] * breakdown[k] for k in TERM_NAMES))
