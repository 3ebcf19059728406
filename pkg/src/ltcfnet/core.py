"""Minimal reverse-mode autodiff over numpy arrays.

Every operation records its parents and a closure mapping the output
gradient to parent gradients.  ``Tensor.backward`` walks that dynamic
graph in reverse topological order.  Image tensors are NHWC.

Float32 is the working precision; ``check_mode()`` switches newly created
tensors to float64 for finite-difference gradient checks.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UsageError

_local = threading.local()
_default_dtype = np.float32

LEAKY_SLOPE = 0.2
LN_EPS = 1e-5


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def check_mode():
    """Create float64 tensors inside the block (gradient checking only)."""
    global _default_dtype
    prev, _default_dtype = _default_dtype, np.float64
    try:
        yield
    finally:
        _default_dtype = prev


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- metadata -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    # -- autodiff -------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype)
                else:
                    node.grad += g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Parameter(Tensor):
    """Trainable leaf tensor with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, data, name="", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class ComplexTensor:
    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError(f"real {self.real.shape} vs imag {self.imag.shape}")

    @property
    def shape(self):
        return self.real.shape

    def numpy(self):
        return self.real.data + 1j * self.imag.data


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def _make(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def power(x: Tensor, exponent: float):
    xd = x.data
    out = xd ** exponent
    return _make(out, (x,), lambda g: (g * exponent * xd ** (exponent - 1),))


def unary(x: Tensor, fn, dfn):
    """Elementwise op from a value function and its derivative ``dfn(x, y)``."""
    xd = x.data
    out = fn(xd).astype(xd.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * np.asarray(dfn(xd, out), dtype=xd.dtype),))


def exp(x):
    return unary(x, np.exp, lambda _, y: y)


def log(x):
    return unary(x, np.log, lambda xd, _: 1.0 / xd)


def sqrt(x):
    return unary(x, np.sqrt, lambda _, y: 0.5 / y)


def tabs(x):
    return unary(x, np.abs, lambda xd, _: np.sign(xd))


def relu(x):
    return unary(x, lambda v: np.maximum(v, 0), lambda xd, _: (xd > 0).astype(xd.dtype))


def leaky_relu(x, slope=LEAKY_SLOPE):
    return unary(x, lambda v: np.maximum(v, slope * v),
                 lambda xd, _: np.where(xd > 0, 1.0, slope))


def tanh(x):
    return unary(x, np.tanh, lambda _, y: 1.0 - y * y)


def clamp(x, lo=None, hi=None, straight_through=None):
    """Clip to [lo, hi].

    With ``straight_through=m`` the gradient is passed unchanged for inputs
    in [lo - m, hi + m] and zeroed beyond that band.
    """
    def fwd(v):
        return np.clip(v, lo, hi)

    if straight_through is None:
        def dfn(xd, _):
            keep = np.ones_like(xd, dtype=bool)
            if lo is not None:
                keep &= xd >= lo
            if hi is not None:
                keep &= xd <= hi
            return keep.astype(xd.dtype)
    else:
        m = straight_through

        def dfn(xd, _):
            keep = np.ones_like(xd, dtype=bool)
            if lo is not None:
                keep &= xd >= lo - m
            if hi is not None:
                keep &= xd <= hi + m
            return keep.astype(xd.dtype)
    return unary(x, fwd, dfn)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None):
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx):
    shape, dtype = x.shape, x.data.dtype
    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(gx, idx, g)
        else:
            gx[idx] = g
        return (gx,)
    return _make(x.data[idx], (x,), bw)


def concat(tensors, axis=-1):
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor):
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims: {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
    return _make(ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor):
    """Bias-free fully connected map over the last axis: ``x @ weight``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g2 @ wd.T).reshape(xd.shape), x2.T @ g2
    return _make((x2 @ wd).reshape(*lead, wd.shape[1]), (x, weight), bw)


def softmax(x: Tensor, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _make(y, (x,), bw)


def softmax_rows(x: Tensor):
    return softmax(x, axis=-1)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps=LN_EPS):
    """Normalize over the channel (last) axis, then apply ``gain``/``bias``."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    c = xd.shape[-1]
    red = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g * gd
        dx = inv / c * (c * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)
    return _make(xhat * gd + bias.data, (x, gain, bias), bw)


def global_avg_pool(x: Tensor):
    """(N,H,W,C) -> (N,1,1,C) spatial mean; also accepts (H,W,C)."""
    return mean(x, axis=(-3, -2), keepdims=True)


# ---------------------------------------------------------------------------
# convolutions (NHWC, kernels kh x kw x Cin x Cout)
# ---------------------------------------------------------------------------

def _promote4(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected HxWxC or NxHxWxC, got {x.shape}")
    return x, False


def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding="same"):
    """2-D cross-correlation.  ``padding`` is "same" (k//2 zeros) or "valid"."""
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    x, squeeze = _promote4(x)
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel spatial dims must be odd, got {kh}x{kw}")
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cin}")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
        if h < kh or w < kw:
            raise ShapeError(f"conv2d valid: input {h}x{w} smaller than kernel {kh}x{kw}")
    else:
        raise ShapeError(f"unknown padding {padding!r}")
    ho, wo = _conv_out(h, kh, stride, ph), _conv_out(w, kw, stride, pw)
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data
    taps = [(i, j, (slice(None), slice(i, i + (ho - 1) * stride + 1, stride),
                    slice(j, j + (wo - 1) * stride + 1, stride)))
            for i in range(kh) for j in range(kw)]
    # columns ordered (kh, kw, cin) to match the kernel's memory layout
    cols = np.concatenate([xp[sl] for _, _, sl in taps], axis=-1).reshape(n * ho * wo, kh * kw * cin)
    wmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    xshape, dtype = xp.shape, xp.dtype

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(kh, kw, cin, cout)
        dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh * kw, cin)
        gxp = np.zeros(xshape, dtype=dtype)
        for t, (_, _, sl) in enumerate(taps):
            gxp[sl] += dcols[:, :, :, t]
        gx = gxp[:, ph: ph + h, pw: pw + w] if (ph or pw) else gxp
        return gx, gw

    y = _make(out, (x, kernel), bw)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, y.shape[1:]) if squeeze else y


def deconv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=2):
    """Stride-2 transposed convolution doubling H and W.

    Equivalent to inserting zeros between input pixels and running a
    stride-1 "same" convolution with ``kernel``.
    """
    if stride != 2:
        raise ShapeError("deconv2d supports stride 2 only")
    x, squeeze = _promote4(x)
    k, kw_, cin, cout = kernel.shape
    if k != kw_ or k % 2 == 0:
        raise ShapeError(f"deconv2d kernel must be square and odd, got {kernel.shape}")
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"deconv2d: input has {c} channels, kernel expects {cin}")
    p = k // 2
    xd = x.data
    x2 = xd.reshape(-1, cin)
    wmat = kernel.data.transpose(2, 0, 1, 3).reshape(cin, k * k * cout)
    taps = (x2 @ wmat).reshape(n, h, w, k, k, cout)
    buf = np.zeros((n, 2 * h + 2 * p, 2 * w + 2 * p, cout), dtype=xd.dtype)
    for a in range(k):
        ra = slice(2 * p - a, 2 * p - a + 2 * (h - 1) + 1, 2)
        for b in range(k):
            rb = slice(2 * p - b, 2 * p - b + 2 * (w - 1) + 1, 2)
            buf[:, ra, rb] += taps[:, :, :, a, b]
    out = buf[:, p: p + 2 * h, p: p + 2 * w]

    def bw(g):
        gbuf = np.pad(g, ((0, 0), (p, p), (p, p), (0, 0)))
        dtaps = np.empty((n, h, w, k, k, cout), dtype=g.dtype)
        for a in range(k):
            ra = slice(2 * p - a, 2 * p - a + 2 * (h - 1) + 1, 2)
            for b in range(k):
                rb = slice(2 * p - b, 2 * p - b + 2 * (w - 1) + 1, 2)
                dtaps[:, :, :, a, b] = gbuf[:, ra, rb]
        d2 = dtaps.reshape(-1, k * k * cout)
        gx = (d2 @ wmat.T).reshape(xd.shape)
        gw = (x2.T @ d2).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
        return gx, gw

    y = _make(np.ascontiguousarray(out), (x, kernel), bw)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, y.shape[1:]) if squeeze else y


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None):
    """Per-channel "same" convolution; ``kernel`` is kh x kw x C."""
    x, squeeze = _promote4(x)
    kh, kw, c = kernel.shape
    if x.shape[-1] != c:
        raise ShapeError(f"depthwise: input has {x.shape[-1]} channels, kernel {c}")
    n, h, w, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    kd = kernel.data
    out = np.zeros_like(x.data)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i: i + h, j: j + w] * kd[i, j]

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for i in range(kh):
            for j in range(kw):
                gk[i, j] = (xp[:, i: i + h, j: j + w] * g).sum(axis=(0, 1, 2))
                gxp[:, i: i + h, j: j + w] += g * kd[i, j]
        return gxp[:, ph: ph + h, pw: pw + w], gk

    y = _make(out, (x, kernel), bw)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, y.shape[1:]) if squeeze else y


def spatial_linear(x: Tensor, mat_h: np.ndarray, mat_w: np.ndarray):
    """Apply fixed matrices along H and W: ``y[n,i,j,c] = A[i,a] B[j,b] x[n,a,b,c]``.

    Covers padding, cropping, pooling, resizing and separable filtering.
    """
    x, squeeze = _promote4(x)
    dtype = x.data.dtype
    ah = np.asarray(mat_h, dtype=dtype)
    aw = np.asarray(mat_w, dtype=dtype)
    if ah.shape[1] != x.shape[1] or aw.shape[1] != x.shape[2]:
        raise ShapeError(f"spatial_linear: {ah.shape}/{aw.shape} vs input {x.shape}")
    n, h, w, c = x.shape
    hn, wn = ah.shape[0], aw.shape[0]
    t = ah @ x.data.reshape(n, h, w * c)
    out = (aw @ t.reshape(n * hn, w, c)).reshape(n, hn, wn, c)

    def bw(g):
        gt = aw.T @ g.reshape(n * hn, wn, c)
        return ((ah.T @ gt.reshape(n, hn, w * c)).reshape(n, h, w, c),)

    y = _make(out, (x,), bw)
    return reshape(y, y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------------------
# Fourier transforms
# ---------------------------------------------------------------------------

def fft2(x: Tensor, axes=(-2, -1)) -> ComplexTensor:
    """Unnormalized 2-D DFT of a real tensor over ``axes``."""
    axes = tuple(axes)
    f = np.fft.fft2(x.data, axes=axes)
    dtype = x.data.dtype
    n = x.shape[axes[0]] * x.shape[axes[1]]

    # dx = Re(A^H g) where A^H = n * ifft2; the imaginary half enters as i*g.
    re_t = _make(f.real.astype(dtype), (x,),
                 lambda g: ((np.fft.ifft2(g, axes=axes).real * n).astype(dtype),))
    im_t = _make(f.imag.astype(dtype), (x,),
                 lambda g: ((np.fft.ifft2(1j * g, axes=axes).real * n).astype(dtype),))
    return ComplexTensor(re_t, im_t)


def ifft2(z: ComplexTensor, axes=(-2, -1)) -> Tensor:
    """Inverse DFT returning the real part.

    The real part of the inverse equals the exact inverse of the spectrum's
    Hermitian-symmetric component, so the result is the real signal whose
    transform is closest to ``z``.
    """
    axes = tuple(axes)
    re, im = z.real, z.imag
    dtype = re.data.dtype
    n = re.shape[axes[0]] * re.shape[axes[1]]
    out = np.fft.ifft2(re.data + 1j * im.data, axes=axes).real.astype(dtype)

    def bw(g):
        f = np.fft.fft2(g, axes=axes) / n
        return f.real.astype(dtype), f.imag.astype(dtype)
    return _make(out, (re, im), bw)


def hermitian_part(spec: np.ndarray, axes=(-2, -1)) -> np.ndarray:
    """(X[k] + conj(X[-k])) / 2 over ``axes``; its inverse DFT is exactly real."""
    flipped = np.conj(spec)
    for ax in axes:
        flipped = np.roll(np.flip(flipped, axis=ax), 1, axis=ax)
    return 0.5 * (spec + flipped)
