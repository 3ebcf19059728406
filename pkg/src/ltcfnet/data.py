"""Paired low/normal image ingestion, synthetic degradation and cropping."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, ShapeError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def read_image(path) -> np.ndarray:
    """Decode an 8-bit PNG/JPEG to HxWx3 float32 in [0, 1].

    Grayscale is replicated to three channels and alpha is dropped.
    """
    from PIL import Image, UnidentifiedImageError
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "F", "1", "P", "LA"):
                im = im.convert("L").convert("RGB")
            elif im.mode != "RGB":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise IngestionError(f"cannot decode {path}: {exc}") from None
    return arr.astype(np.float32) / 255.0


def write_image(path, img: np.ndarray):
    """Write an HxWx3 float image in [0, 1] as an 8-bit PNG."""
    from PIL import Image
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PNG")


def split_of(name: str, test_fraction: float) -> str:
    """Deterministic train/test assignment from a hash of the file name."""
    digest = hashlib.sha1(name.encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "big") / 2.0 ** 64
    return "test" if u < test_fraction else "train"


@dataclass
class PairedDataset:
    """In-memory list of (low, normal) float image pairs."""

    low: list
    normal: list
    names: list
    split: str = "train"
    sources: list = field(default_factory=list)

    def __post_init__(self):
        if not self.low:
            raise IngestionError(f"empty dataset ({self.split} split)")
        if not (len(self.low) == len(self.normal) == len(self.names)):
            raise ShapeError("low, normal and names must have equal length")
        for name, a, b in zip(self.names, self.low, self.normal):
            if a.shape != b.shape:
                raise ShapeError(f"{name}: low {a.shape} vs normal {b.shape}")

    def __len__(self):
        return len(self.low)

    def __getitem__(self, i):
        return self.low[i], self.normal[i]

    @property
    def resolutions(self):
        return sorted({a.shape[:2] for a in self.low})

    def subset(self, split: str, test_fraction: float) -> "PairedDataset":
        keep = [i for i, n in enumerate(self.names) if split_of(n, test_fraction) == split]
        return PairedDataset([self.low[i] for i in keep], [self.normal[i] for i in keep],
                             [self.names[i] for i in keep], split,
                             [self.sources[i] for i in keep] if self.sources else [])


def _listing(directory: Path):
    return {p.name: p for p in sorted(directory.iterdir())
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}


def load_pairs(low_dir, normal_dir) -> PairedDataset:
    """Load matching files from two directories, sorted by file name.

    All problems (missing counterparts, undecodable files, size mismatches)
    are collected and reported together in one IngestionError.
    """
    low_dir, normal_dir = Path(low_dir), Path(normal_dir)
    for d in (low_dir, normal_dir):
        if not d.is_dir():
            raise IngestionError(f"dataset directory not found: {d}")
    lows, normals = _listing(low_dir), _listing(normal_dir)
    if not lows and not normals:
        raise IngestionError(f"empty dataset: no images in {low_dir} or {normal_dir}")
    problems = [f"{n}: no counterpart in {normal_dir}" for n in sorted(set(lows) - set(normals))]
    problems += [f"{n}: no counterpart in {low_dir}" for n in sorted(set(normals) - set(lows))]
    low, normal, names, sources = [], [], [], []
    for name in sorted(set(lows) & set(normals)):
        try:
            a, b = read_image(lows[name]), read_image(normals[name])
        except IngestionError as exc:
            problems.append(str(exc))
            continue
        if a.shape != b.shape:
            problems.append(f"{name}: dimension mismatch, low {a.shape} vs normal {b.shape}")
            continue
        low.append(a)
        normal.append(b)
        names.append(name)
        sources.append((lows[name], normals[name]))
    if problems:
        raise IngestionError(f"{len(problems)} problem(s) loading {low_dir} / {normal_dir}", problems)
    return PairedDataset(low, normal, names, "train", sources)


def load_root(root) -> PairedDataset:
    """Load ``<root>/low`` against ``<root>/high``."""
    root = Path(root)
    return load_pairs(root / "low", root / "high")


@dataclass
class DegradationConfig:
    gamma_range: tuple = (2.0, 4.0)
    sigma_range: tuple = (0.01, 0.01)
    seed: int = 0

    def __post_init__(self):
        self.gamma_range = tuple(float(g) for g in self.gamma_range)
        self.sigma_range = tuple(float(s) for s in self.sigma_range)
        g0, g1 = self.gamma_range
        s0, s1 = self.sigma_range
        if g0 < 1 or g1 < g0:
            raise ConfigError(f"gamma range must satisfy 1 <= lo <= hi, got {self.gamma_range}")
        if s0 < 0 or s1 < s0:
            raise ConfigError(f"sigma range must satisfy 0 <= lo <= hi, got {self.sigma_range}")


def synthesize_pair(normal: np.ndarray, cfg: DegradationConfig, rng=None):
    """Darken with a random gamma and add Gaussian noise: returns (low, normal)."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    normal = np.asarray(normal, dtype=np.float32)
    gamma = rng.uniform(*cfg.gamma_range)
    sigma = rng.uniform(*cfg.sigma_range)
    low = normal.astype(np.float64) ** gamma
    if sigma > 0:
        low = low + rng.normal(0.0, sigma, size=normal.shape)
    return np.clip(low, 0.0, 1.0).astype(np.float32), normal


def synthetic_normal(rng, size=64) -> np.ndarray:
    """A smooth, moderately bright color test image: gradients plus soft blobs."""
    yy, xx = np.mgrid[0:size, 0:size] / float(size - 1)
    img = np.empty((size, size, 3))
    for ch in range(3):
        a, b, c = rng.uniform(-0.3, 0.3, size=3)
        img[..., ch] = 0.5 + a * (xx - 0.5) + b * (yy - 0.5) + c * (xx - 0.5) * (yy - 0.5)
    for _ in range(3):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        r = rng.uniform(0.08, 0.25)
        color = rng.uniform(-0.25, 0.25, size=3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += blob[..., None] * color
    return np.clip(img, 0.05, 0.95).astype(np.float32)


def synthetic_dataset(n, size=64, cfg: DegradationConfig | None = None) -> PairedDataset:
    """``n`` synthetic pairs, fully determined by ``cfg.seed``."""
    cfg = cfg or DegradationConfig()
    rng = np.random.default_rng(cfg.seed)
    low, normal = [], []
    for _ in range(n):
        lo, hi = synthesize_pair(synthetic_normal(rng, size), cfg, rng)
        low.append(lo)
        normal.append(hi)
    return PairedDataset(low, normal, [f"synthetic_{i:04d}.png" for i in range(n)], "train")


def random_crop_pair(pair, patch: int, seed=None, rng=None):
    """Crop the same ``patch`` x ``patch`` window from both images."""
    low, normal = pair
    h, w = low.shape[:2]
    if normal.shape[:2] != (h, w):
        raise ShapeError(f"pair sizes differ: {low.shape} vs {normal.shape}")
    if patch > min(h, w):
        raise ShapeError(f"patch {patch} larger than image {h}x{w}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    y = int(rng.integers(0, h - patch + 1))
    x = int(rng.integers(0, w - patch + 1))
    return low[y:y + patch, x:x + patch], normal[y:y + patch, x:x + patch]


def batches(dataset: PairedDataset, batch_size: int, patch: int, rng):
    """One epoch of shuffled, cropped NxPxPx3 batches (last batch may be short)."""
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        crops = [random_crop_pair(dataset[i], patch, rng=rng) for i in order[start:start + batch_size]]
        yield np.stack([c[0] for c in crops]), np.stack([c[1] for c in crops])
