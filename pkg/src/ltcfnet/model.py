"""Dual color-space enhancement network: LAB and YUV branches fused in RGB."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import colorspace as cs
from . import core
from .blocks import CdBlock, FbpBlock, MhsaBlock, MsefBlock
from .core import Tensor
from .errors import ConfigError
from .nn import Conv2d, Module, avg_pool_matrix, crop_to, linear_resize_matrix, pad_to_multiple

BRANCHES = ("lab", "yuv", "both")
CHROMA = {"lab": ("a", "b"), "yuv": ("u", "v")}


@dataclass
class ModelConfig:
    base_width: int = 16
    heads: int = 4
    use_fbp: bool = True
    use_msef: bool = True
    branches: str = "both"
    share_cd_weights: bool = False
    max_attention_tokens: int = 4096
    seed: int = 0
    cd_widths: tuple = (8, 16, 32, 32)
    cd_heads: int = 4
    lum_pool: int = 4
    fbp_width: int = 16
    msef_reduction: int = 4
    clamp_margin: float = 0.5

    def __post_init__(self):
        self.branches = str(self.branches).lower()
        self.cd_widths = tuple(int(w) for w in self.cd_widths)
        self.validate()

    def validate(self):
        if self.branches not in BRANCHES:
            raise ConfigError(f"branches must be one of {BRANCHES}, got {self.branches!r}")
        if self.heads < 1 or self.base_width % self.heads:
            raise ConfigError(f"base_width {self.base_width} not divisible by heads {self.heads}")
        if len(self.cd_widths) != 4 or min(self.cd_widths) < 1:
            raise ConfigError(f"cd_widths must be 4 positive ints, got {self.cd_widths}")
        if self.cd_widths[-1] % self.cd_heads:
            raise ConfigError(f"CD bottleneck width {self.cd_widths[-1]} not divisible by {self.cd_heads}")
        if self.lum_pool < 1 or self.max_attention_tokens < 1:
            raise ConfigError("lum_pool and max_attention_tokens must be positive")

    @property
    def spaces(self):
        return ("lab", "yuv") if self.branches == "both" else (self.branches,)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["cd_widths"] = list(self.cd_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class LuminancePath(Module):
    """Entry conv, pooled-token attention with residual, projection to one plane."""

    def __init__(self, width, heads, pool, max_tokens, rng):
        self.pool = pool
        self.entry = Conv2d(1, width, rng=rng)
        self.mhsa = MhsaBlock(width, heads, max_tokens=max_tokens, rng=rng)
        self.out = Conv2d(width, 1, rng=rng)

    def forward(self, lum):
        f = core.leaky_relu(self.entry(lum))
        p = self.pool
        if p > 1:
            fp, size = pad_to_multiple(f, p)
            hp, wp = fp.shape[-3], fp.shape[-2]
            small = core.spatial_linear(fp, avg_pool_matrix(hp, p), avg_pool_matrix(wp, p))
            att = self.mhsa(small)
            att = core.spatial_linear(att, linear_resize_matrix(hp // p, hp), linear_resize_matrix(wp // p, wp))
            att = crop_to(att, size, (hp - size[0], wp - size[1]))
        else:
            att = self.mhsa(f)
        return self.out(f + att)

    def flops(self, h, w):
        p = self.pool
        hs, ws = -(-h // p), -(-w // p)
        return self.entry.flops(h, w) + self.mhsa.flops(hs, ws) + self.out.flops(h, w)


class Branch(Module):
    """One color-space branch producing an RGB estimate."""

    def __init__(self, space, cfg: ModelConfig, rng, shared_cd=None):
        self.space = space
        self.use_fbp, self.use_msef = cfg.use_fbp, cfg.use_msef
        c = cfg.base_width
        self.lum = LuminancePath(c, cfg.heads, cfg.lum_pool, cfg.max_attention_tokens, rng)
        self.fbp = FbpBlock(cfg.fbp_width, rng=rng) if cfg.use_fbp else None
        names = CHROMA[space]
        if shared_cd is None:
            for name in names:
                setattr(self, f"cd_{name}", CdBlock(cfg.cd_widths, cfg.cd_heads, cfg.max_attention_tokens, rng=rng))
        self._shared_cd = shared_cd
        self.fuse_in = Conv2d(3, c, rng=rng)
        self.msef = MsefBlock(c, cfg.msef_reduction, rng=rng) if cfg.use_msef else None
        self.fuse_out = Conv2d(c, 3, rng=rng)

    def chroma_blocks(self):
        if self._shared_cd is not None:
            return [self._shared_cd, self._shared_cd]
        return [getattr(self, f"cd_{n}") for n in CHROMA[self.space]]

    def forward(self, rgb):
        to_space = cs.rgb2lab if self.space == "lab" else cs.rgb2yuv
        from_space = cs.lab2rgb if self.space == "lab" else cs.yuv2rgb
        planes = cs.normalize(to_space(rgb), self.space)
        lum = self.lum(planes[..., 0:1])
        if self.fbp is not None:
            lum = self.fbp(lum)
        chroma = [cd(planes[..., i:i + 1]) for i, cd in zip((1, 2), self.chroma_blocks())]
        feat = core.leaky_relu(self.fuse_in(core.concat([lum] + chroma, axis=-1)))
        if self.msef is not None:
            feat = self.msef(feat)
        out = self.fuse_out(feat) + planes
        return from_space(cs.denormalize(out, self.space))

    def flops(self, h, w):
        total = self.lum.flops(h, w) + self.fuse_in.flops(h, w) + self.fuse_out.flops(h, w)
        if self.fbp is not None:
            total += self.fbp.flops(h, w)
        if self.msef is not None:
            total += self.msef.flops(h, w)
        return total + sum(cd.flops(h, w) for cd in self.chroma_blocks())


class LtcfNet(Module):
    """Full network.  Input and output are RGB in [0, 1], HxWx3 or NxHxWx3."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        shared = None
        if config.share_cd_weights:
            shared = CdBlock(config.cd_widths, config.cd_heads, config.max_attention_tokens, rng=rng)
            self.cd_shared = shared
        for space in config.spaces:
            setattr(self, space, Branch(space, config, rng, shared_cd=shared))
        self.fusion = Conv2d(6, 3, rng=rng) if config.branches == "both" else None
        for name, p in self.named_parameters():
            p.name = name

    def branches(self):
        return [getattr(self, s) for s in self.config.spaces]

    def forward(self, rgb, training=False):
        rgb = core.as_tensor(rgb)
        x, squeeze = core._promote4(rgb)
        estimates = [b(x) for b in self.branches()]
        if self.fusion is not None:
            y = self.fusion(core.concat(estimates, axis=-1))
        else:
            y = estimates[0]
        margin = self.config.clamp_margin if training else None
        y = core.clamp(y, 0.0, 1.0, straight_through=margin)
        return core.reshape(y, y.shape[1:]) if squeeze else y

    def enhance(self, rgb: np.ndarray) -> np.ndarray:
        """Inference on an HxWx3 float array."""
        with core.no_grad():
            return self.forward(Tensor(rgb)).data

    def state(self):
        return {name: p.data for name, p in self.named_parameters()}

    def flops(self, h, w):
        total = sum(b.flops(h, w) for b in self.branches())
        if self.fusion is not None:
            total += self.fusion.flops(h, w)
        return total

    def module_table(self, h=256, w=256):
        """Rows of (name, params, flops) for the top-level components."""
        rows = []
        if self.config.share_cd_weights:
            rows.append(("cd_shared", self.cd_shared.num_params(), 0))
        for b in self.branches():
            s = b.space
            rows.append((f"{s}.lum", b.lum.num_params(), b.lum.flops(h, w)))
            if b.fbp is not None:
                rows.append((f"{s}.fbp", b.fbp.num_params(), b.fbp.flops(h, w)))
            for name, cd in zip(CHROMA[s], b.chroma_blocks()):
                own = 0 if self.config.share_cd_weights else cd.num_params()
                rows.append((f"{s}.cd_{name}", own, cd.flops(h, w)))
            fuse_p = b.fuse_in.num_params() + b.fuse_out.num_params()
            fuse_f = b.fuse_in.flops(h, w) + b.fuse_out.flops(h, w)
            rows.append((f"{s}.fuse", fuse_p, fuse_f))
            if b.msef is not None:
                rows.append((f"{s}.msef", b.msef.num_params(), b.msef.flops(h, w)))
        if self.fusion is not None:
            rows.append(("fusion", self.fusion.num_params(), self.fusion.flops(h, w)))
        return rows


def build(config: ModelConfig | None = None) -> LtcfNet:
    return LtcfNet(config or ModelConfig())


def count_params(net: Module) -> int:
    return net.num_params()


def estimate_flops(net: Module, h: int = 256, w: int = 256) -> int:
    return int(net.flops(h, w))


def cast(net: LtcfNet, dtype) -> LtcfNet:
    """Convert every parameter in place (e.g. to float64 for gradient checks)."""
    for p in net.parameters():
        p.data = p.data.astype(dtype)
        p.grad = np.zeros_like(p.data)
    return net
