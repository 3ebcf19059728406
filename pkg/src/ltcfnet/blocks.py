"""Network blocks: multi-head self-attention, channel denoiser, squeeze-excite
fusion and Fourier branch processing.  All blocks are shape preserving."""
from __future__ import annotations

import math

import numpy as np

from . import core
from .core import Parameter, Tensor
from .errors import ConfigError, ResourceError
from .nn import Conv2d, Deconv2d, DepthwiseConv2d, LayerNorm, Linear, Module, crop_to, glorot_uniform, pad_to_multiple


def fft_flops(h, w):
    n = h * w
    return int(round(5 * n * math.log2(n))) if n > 1 else 0


class MhsaBlock(Module):
    """Per-head scaled dot-product attention over the H*W spatial tokens.

    Each head owns bias-free d_k x d_k query/key/value maps applied to its
    slice of channels.  Heads are concatenated, projected by a C x C map and
    summed with a depthwise 3x3 positional encoding of the value tokens.
    """

    def __init__(self, c, heads=4, max_tokens=4096, pos_enc=True, rng=None):
        if heads < 1 or c % heads:
            raise ConfigError(f"channels {c} not divisible by heads {heads}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c, self.heads, self.dk = c, heads, c // heads
        self.max_tokens = max_tokens
        dk = self.dk
        self.wq = Parameter(glorot_uniform(rng, (heads, dk, dk), dk, dk))
        self.wk = Parameter(glorot_uniform(rng, (heads, dk, dk), dk, dk))
        self.wv = Parameter(glorot_uniform(rng, (heads, dk, dk), dk, dk))
        self.proj = Parameter(glorot_uniform(rng, (c, c), c, c))
        self.pos = DepthwiseConv2d(c, 3, bias=False, rng=rng) if pos_enc else None

    def _tokens(self, x):
        n, h, w, c = x.shape
        t = h * w
        if t > self.max_tokens:
            factor = math.ceil(math.sqrt(t / self.max_tokens))
            raise ResourceError(
                f"attention over {t} tokens exceeds limit {self.max_tokens}; "
                f"downscale the input by at least {factor}x per side or use tiled inference")
        xt = core.reshape(x, (n, t, self.heads, self.dk))
        return core.transpose(xt, (0, 2, 1, 3))

    def attention(self, x):
        """Return (attention weights NxkxTxT, value tokens NxkxTxd_k)."""
        xt = self._tokens(x)
        q = core.matmul(xt, self.wq)
        k = core.matmul(xt, self.wk)
        v = core.matmul(xt, self.wv)
        scores = core.matmul(q, core.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.dk))
        return core.softmax_rows(scores), v

    def forward(self, x, project=True):
        x4, squeeze = core._promote4(x)
        n, h, w, c = x4.shape
        if c != self.c:
            raise core.ShapeError(f"MHSA built for {self.c} channels, got {c}")
        attn, v = self.attention(x4)
        heads = core.matmul(attn, v)
        merged = core.reshape(core.transpose(heads, (0, 2, 1, 3)), (n, h * w, c))
        if not project:
            out = core.reshape(merged, (n, h, w, c))
        else:
            out = core.reshape(core.linear(merged, self.proj), (n, h, w, c))
            if self.pos is not None:
                v_img = core.reshape(core.transpose(v, (0, 2, 1, 3)), (n, h, w, c))
                out = out + self.pos(v_img)
        return core.reshape(out, out.shape[1:]) if squeeze else out

    def flops(self, h, w):
        t = h * w
        macs = t * 3 * self.heads * self.dk * self.dk
        macs += 2 * self.heads * t * t * self.dk
        macs += t * self.c * self.c
        total = 2 * macs
        if self.pos is not None:
            total += self.pos.flops(h, w)
        return total


class CdBlock(Module):
    """Four-scale U-shaped denoiser for one chroma plane (HxWx1 -> HxWx1).

    Encoder: 3x3 stride-1 entry conv then three stride-2 convs.  Bottleneck
    attention with a residual.  Decoder: three stride-2 deconvs, each added
    to the encoder feature of matching scale.  Two refinement convs and Tanh.
    Inputs whose sides are not multiples of 8 are reflect padded and cropped.
    """

    def __init__(self, widths=(8, 16, 32, 32), heads=4, max_tokens=4096, rng=None):
        if len(widths) != 4:
            raise ConfigError(f"CD needs 4 widths, got {widths}")
        rng = rng if rng is not None else np.random.default_rng(0)
        c0, c1, c2, c3 = widths
        self.widths = tuple(widths)
        self.entry = Conv2d(1, c0, rng=rng)
        self.down = [Conv2d(c0, c1, stride=2, rng=rng),
                     Conv2d(c1, c2, stride=2, rng=rng),
                     Conv2d(c2, c3, stride=2, rng=rng)]
        self.mhsa = MhsaBlock(c3, heads, max_tokens=max_tokens, rng=rng)
        self.up = [Deconv2d(c3, c2, rng=rng),
                   Deconv2d(c2, c1, rng=rng),
                   Deconv2d(c1, c0, rng=rng)]
        self.refine = Conv2d(c0, c0, rng=rng)
        self.out = Conv2d(c0, 1, rng=rng)

    def forward(self, r, trace=None):
        x, size = pad_to_multiple(r, 8)
        pad = (x.shape[-3] - size[0], x.shape[-2] - size[1])
        feats = [core.leaky_relu(self.entry(x))]
        for conv in self.down:
            feats.append(core.leaky_relu(conv(feats[-1])))
        g = feats[3] + self.mhsa(feats[3])
        ups = []
        for deconv, skip in zip(self.up, (feats[2], feats[1], feats[0])):
            g = core.leaky_relu(deconv(g)) + skip
            ups.append(g)
        y = core.tanh(self.out(core.leaky_relu(self.refine(g))))
        if trace is not None:
            trace["F"] = [f.shape for f in feats]
            trace["G"] = [u.shape for u in ups]
        return crop_to(y, size, pad)

    def flops(self, h, w):
        h, w = -(-h // 8) * 8, -(-w // 8) * 8
        total = self.entry.flops(h, w)
        sh, sw = h, w
        for conv in self.down:
            total += conv.flops(sh, sw)
            sh, sw = conv.out_size(sh, sw)
        total += self.mhsa.flops(sh, sw)
        for deconv in self.up:
            total += deconv.flops(sh, sw)
            sh, sw = 2 * sh, 2 * sw
        return total + self.refine.flops(h, w) + self.out.flops(h, w)


class MsefBlock(Module):
    """Layer norm, then squeeze (GAP -> W_1 -> ReLU) and excite (W_2 -> Tanh)
    as a channel gate on the normalized features, plus the input residual."""

    def __init__(self, c, reduction=4, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c = c
        cr = max(1, c // reduction)
        self.norm = LayerNorm(c)
        self.w1 = Linear(c, cr, rng=rng)
        self.w2 = Linear(cr, c, rng=rng)

    def forward(self, x):
        z = self.norm(x)
        d_re = core.relu(self.w1(core.global_avg_pool(z)))
        gate = core.tanh(self.w2(d_re))
        return gate * z + x

    def flops(self, h, w):
        return 2 * (self.w1.din * self.w1.dout + self.w2.din * self.w2.dout)


class FbpBlock(Module):
    """Learned filtering of a single-plane spectrum.

    The real and imaginary parts each pass through conv(1->W) -> LeakyReLU ->
    conv(W->W) -> conv(W->1); the filtered spectrum is inverted and added to
    the input.  Convs carry no bias so the block is positively homogeneous.
    """

    def __init__(self, width=16, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.width = width
        self.real = [Conv2d(1, width, bias=False, rng=rng),
                     Conv2d(width, width, bias=False, rng=rng),
                     Conv2d(width, 1, bias=False, rng=rng)]
        self.imag = [Conv2d(1, width, bias=False, rng=rng),
                     Conv2d(width, width, bias=False, rng=rng),
                     Conv2d(width, 1, bias=False, rng=rng)]

    @staticmethod
    def _stack(convs, x):
        x = core.leaky_relu(convs[0](x))
        return convs[2](convs[1](x))

    def filtered(self, lum):
        """Spectrum after both conv stacks, as a ComplexTensor."""
        spec = core.fft2(lum, axes=(-3, -2))
        return core.ComplexTensor(self._stack(self.real, spec.real), self._stack(self.imag, spec.imag))

    def forward(self, lum):
        return lum + core.ifft2(self.filtered(lum), axes=(-3, -2))

    def flops(self, h, w):
        convs = sum(c.flops(h, w) for c in self.real + self.imag)
        return convs + 2 * fft_flops(h, w)
