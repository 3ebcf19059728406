"""Module containers, parameterized layers and fixed spatial resampling."""
from __future__ import annotations

import numpy as np

from . import core
from .core import Parameter, Tensor


def glorot_uniform(rng: np.random.Generator, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Base class: parameters are discovered from attributes, recursively."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module) and not name.startswith("_"):
                yield name, value

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def flops(self, h: int, w: int) -> int:
        """Floating point operations for one HxW input (MACs counted twice)."""
        return 0

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, bias=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.weight = Parameter(glorot_uniform(rng, (k, k, cin, cout), k * k * cin, k * k * cout))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x):
        return core.conv2d(x, self.weight, self.bias, stride=self.stride)

    def out_size(self, h, w):
        return -(-h // self.stride), -(-w // self.stride)

    def flops(self, h, w):
        ho, wo = self.out_size(h, w)
        return 2 * ho * wo * self.k * self.k * self.cin * self.cout


class Deconv2d(Module):
    def __init__(self, cin, cout, k=3, bias=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.k = cin, cout, k
        self.weight = Parameter(glorot_uniform(rng, (k, k, cin, cout), k * k * cin, k * k * cout))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x):
        return core.deconv2d(x, self.weight, self.bias)

    def flops(self, h, w):
        # every input pixel scatters k*k*cin*cout MACs
        return 2 * h * w * self.k * self.k * self.cin * self.cout


class DepthwiseConv2d(Module):
    def __init__(self, c, k=3, bias=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c, self.k = c, k
        self.weight = Parameter(glorot_uniform(rng, (k, k, c), k * k, k * k))
        self.bias = Parameter(np.zeros(c)) if bias else None

    def forward(self, x):
        return core.depthwise_conv2d(x, self.weight, self.bias)

    def flops(self, h, w):
        return 2 * h * w * self.k * self.k * self.c


class Linear(Module):
    """Bias-free dense layer over the last axis."""

    def __init__(self, din, dout, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.din, self.dout = din, dout
        self.weight = Parameter(glorot_uniform(rng, (din, dout), din, dout))

    def forward(self, x):
        return core.linear(x, self.weight)

    def flops(self, h, w):
        return 2 * h * w * self.din * self.dout


class LayerNorm(Module):
    def __init__(self, c):
        self.gain = Parameter(np.ones(c))
        self.bias = Parameter(np.zeros(c))

    def forward(self, x):
        return core.layer_norm(x, self.gain, self.bias)


# ---------------------------------------------------------------------------
# fixed resampling matrices for core.spatial_linear
# ---------------------------------------------------------------------------

def reflect_pad_matrix(n: int, before: int, after: int) -> np.ndarray:
    """Selection matrix for reflect padding ("dcb|abcd|cba")."""
    idx = np.arange(-before, n + after)
    if n == 1:
        idx = np.zeros_like(idx)
    else:
        period = 2 * (n - 1)
        idx = np.abs(np.mod(idx, period))
        idx = np.where(idx >= n, period - idx, idx)
    m = np.zeros((len(idx), n))
    m[np.arange(len(idx)), idx] = 1.0
    return m


def crop_matrix(n_in: int, start: int, size: int) -> np.ndarray:
    m = np.zeros((size, n_in))
    m[np.arange(size), start + np.arange(size)] = 1.0
    return m


def avg_pool_matrix(n: int, factor: int) -> np.ndarray:
    if n % factor:
        raise core.ShapeError(f"size {n} not divisible by pool factor {factor}")
    m = np.zeros((n // factor, n))
    for i in range(n // factor):
        m[i, i * factor:(i + 1) * factor] = 1.0 / factor
    return m


def linear_resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation with half-pixel centers (edge-clamped)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


def pad_to_multiple(x: Tensor, multiple: int):
    """Reflect-pad H and W up to a multiple; returns (tensor, (h, w))."""
    h, w = x.shape[-3], x.shape[-2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return x, (h, w)
    mh = reflect_pad_matrix(h, ph // 2, ph - ph // 2)
    mw = reflect_pad_matrix(w, pw // 2, pw - pw // 2)
    return core.spatial_linear(x, mh, mw), (h, w)


def crop_to(x: Tensor, size, pad_total):
    h, w = size
    ph, pw = pad_total
    if not ph and not pw:
        return x
    hp, wp = x.shape[-3], x.shape[-2]
    return core.spatial_linear(x, crop_matrix(hp, ph // 2, h), crop_matrix(wp, pw // 2, w))
