"""RGB <-> CIELAB (via XYZ) and RGB <-> YUV conversions.

The ``*2*`` functions operate on tensors whose last axis holds the three
planes and are differentiable.  The ``*_to_*`` functions wrap them for
``ImagePlanes`` with source-space checking and gamut flags.

RGB is treated as linear light in [0, 1]; ``srgb_to_linear`` is available
for callers whose data is gamma encoded.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import core
from .core import Tensor
from .errors import UsageError


class Space(str, Enum):
    RGB = "rgb"
    LAB = "lab"
    YUV = "yuv"


# Per-plane value ranges used for net normalization.
RANGES = {
    Space.RGB: ((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)),
    Space.LAB: ((0.0, 100.0), (-128.0, 128.0), (-128.0, 128.0)),
    Space.YUV: ((0.0, 1.0), (-0.436, 0.436), (-0.615, 0.615)),
}

RGB_TO_YUV = np.array([
    [0.299, 0.587, 0.114],
    [-0.14713, -0.28886, 0.436],
    [0.615, -0.51499, -0.10001],
])
YUV_TO_RGB = np.array([
    [1.000000, -0.000012, 1.139835],
    [1.000004, -0.394646, -0.580594],
    [0.999980, 2.032112, -0.000015],
])

# linear sRGB primaries, D65
RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])

_DELTA = 6.0 / 29.0
_DELTA3 = _DELTA ** 3
_SLOPE = 1.0 / (3.0 * _DELTA ** 2)
_OFFSET = 4.0 / 29.0

# lab = f(xyz/white) @ _F_TO_LAB + _LAB_SHIFT
_F_TO_LAB = np.array([
    [0.0, 500.0, 0.0],
    [116.0, -500.0, 200.0],
    [0.0, 0.0, -200.0],
])
_LAB_SHIFT = np.array([-16.0, 0.0, 0.0])


@dataclass(frozen=True)
class WhitePoint:
    xn: float
    yn: float
    zn: float

    def __post_init__(self):
        if min(self.xn, self.yn, self.zn) <= 0:
            raise ValueError(f"white point components must be positive: {self}")

    def as_array(self):
        return np.array([self.xn, self.yn, self.zn])


D65 = WhitePoint(95.047, 100.0, 108.883)


@dataclass
class ImagePlanes:
    """An HxWx3 (or NxHxWx3) image tagged with its color space."""

    space: Space
    planes: Tensor
    out_of_gamut: bool = False

    def __post_init__(self):
        self.space = Space(self.space)
        if not isinstance(self.planes, Tensor):
            self.planes = Tensor(self.planes)
        if self.planes.shape[-1] != 3:
            raise core.ShapeError(f"expected 3 planes, got shape {self.planes.shape}")

    @classmethod
    def from_rgb(cls, rgb):
        data = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
        return cls(Space.RGB, Tensor(np.clip(data, 0.0, 1.0)))

    @property
    def ranges(self):
        return RANGES[self.space]

    def numpy(self):
        return self.planes.data


def _mix(x: Tensor, mat: np.ndarray) -> Tensor:
    """Apply a 3x3 matrix to the plane axis: ``out_j = sum_i mat[j, i] x_i``."""
    return core.linear(x, Tensor(mat.T, dtype=x.dtype))


def _lab_f(t: Tensor) -> Tensor:
    def fn(v):
        return np.where(v > _DELTA3, np.cbrt(np.maximum(v, _DELTA3)), v * _SLOPE + _OFFSET)

    def dfn(v, _):
        c = np.cbrt(np.maximum(v, _DELTA3))
        return np.where(v > _DELTA3, 1.0 / (3.0 * c * c), _SLOPE)
    return core.unary(t, fn, dfn)


def _lab_f_inv(u: Tensor) -> Tensor:
    def fn(v):
        return np.where(v > _DELTA, v ** 3, (v - _OFFSET) / _SLOPE)

    def dfn(v, _):
        return np.where(v > _DELTA, 3.0 * v * v, 1.0 / _SLOPE)
    return core.unary(u, fn, dfn)


def rgb2yuv(rgb: Tensor) -> Tensor:
    return _mix(rgb, RGB_TO_YUV)


def yuv2rgb(yuv: Tensor) -> Tensor:
    return _mix(yuv, YUV_TO_RGB)


def rgb2lab(rgb: Tensor, wp: WhitePoint = D65) -> Tensor:
    scaled = 100.0 * RGB_TO_XYZ / wp.as_array()[:, None]
    f = _lab_f(_mix(rgb, scaled))
    fx, fy, fz = f[..., 0:1], f[..., 1:2], f[..., 2:3]
    # explicit differences keep a*, b* exactly zero when fx == fy == fz
    return core.concat([fy * 116.0 - 16.0, (fx - fy) * 500.0, (fy - fz) * 200.0], axis=-1)


def lab2rgb(lab: Tensor, wp: WhitePoint = D65) -> Tensor:
    f = core.linear(lab - Tensor(_LAB_SHIFT, dtype=lab.dtype),
                    Tensor(np.linalg.inv(_F_TO_LAB), dtype=lab.dtype))
    t = _lab_f_inv(f)
    scaled = 100.0 * RGB_TO_XYZ / wp.as_array()[:, None]
    return _mix(t, np.linalg.inv(scaled))


def _expect(img: ImagePlanes, space: Space):
    if img.space != space:
        raise UsageError(f"expected {space.value.upper()} planes, got {img.space.value.upper()}")


def rgb_to_yuv(img: ImagePlanes) -> ImagePlanes:
    _expect(img, Space.RGB)
    return ImagePlanes(Space.YUV, rgb2yuv(img.planes))


def yuv_to_rgb(img: ImagePlanes) -> ImagePlanes:
    _expect(img, Space.YUV)
    return ImagePlanes(Space.RGB, yuv2rgb(img.planes))


def rgb_to_lab(img: ImagePlanes, wp: WhitePoint = D65) -> ImagePlanes:
    _expect(img, Space.RGB)
    return ImagePlanes(Space.LAB, rgb2lab(img.planes, wp))


def lab_to_rgb(img: ImagePlanes, wp: WhitePoint = D65, tol=1e-6) -> ImagePlanes:
    """Invert to RGB; results outside [0, 1] are clamped and flagged."""
    _expect(img, Space.LAB)
    rgb = lab2rgb(img.planes, wp)
    d = rgb.data
    flagged = bool(np.any(d < -tol) or np.any(d > 1.0 + tol))
    return ImagePlanes(Space.RGB, Tensor(np.clip(d, 0.0, 1.0), dtype=d.dtype), out_of_gamut=flagged)


def _affine(space: Space):
    lo = np.array([r[0] for r in RANGES[space]])
    hi = np.array([r[1] for r in RANGES[space]])
    scale = 2.0 / (hi - lo)
    return scale, -1.0 - lo * scale


def normalize(planes: Tensor, space: Space) -> Tensor:
    """Map each plane's nominal range onto [-1, 1]."""
    scale, shift = _affine(Space(space))
    return planes * Tensor(scale, dtype=planes.dtype) + Tensor(shift, dtype=planes.dtype)


def denormalize(planes: Tensor, space: Space) -> Tensor:
    scale, shift = _affine(Space(space))
    return (planes - Tensor(shift, dtype=planes.dtype)) * Tensor(1.0 / scale, dtype=planes.dtype)


def normalize_for_net(img: ImagePlanes) -> Tensor:
    return normalize(img.planes, img.space)


def denormalize_from_net(t: Tensor, space: Space) -> ImagePlanes:
    return ImagePlanes(Space(space), denormalize(t, space))


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)
