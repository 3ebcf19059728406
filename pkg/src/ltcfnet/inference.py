"""Whole-image and tiled inference."""
from __future__ import annotations

import numpy as np

TILE = 256
OVERLAP = 32


def _starts(n, tile, step):
    if n <= tile:
        return [0]
    starts = list(range(0, n - tile, step))
    return starts + [n - tile]


def _ramp(n, overlap):
    """Blend weights along one axis: linear rise over ``overlap`` pixels at each end."""
    w = np.ones(n)
    if overlap > 0 and n > 2 * overlap:
        r = (np.arange(overlap) + 0.5) / overlap
        w[:overlap] = r
        w[n - overlap:] = r[::-1]
    return w


def enhance_tiled(net, img: np.ndarray, tile=TILE, overlap=OVERLAP) -> np.ndarray:
    """Run ``net`` on overlapping tiles and blend them with linear ramps.

    Images that fit in one tile go through a single forward pass, so the
    result is then identical to ``net.enhance``.  Across tile seams this
    is an approximation: attention and the Fourier filter see only a tile.
    """
    h, w = img.shape[:2]
    if h <= tile and w <= tile:
        return net.enhance(img)
    if overlap >= tile:
        raise ValueError(f"overlap {overlap} must be smaller than tile {tile}")
    step = tile - overlap
    out = np.zeros((h, w, 3))
    weight = np.zeros((h, w, 1))
    for y in _starts(h, tile, step):
        for x in _starts(w, tile, step):
            th, tw = min(tile, h), min(tile, w)
            patch = net.enhance(img[y:y + th, x:x + tw])
            wt = np.outer(_ramp(th, overlap if h > tile else 0), _ramp(tw, overlap if w > tile else 0))[..., None]
            out[y:y + th, x:x + tw] += patch * wt
            weight[y:y + th, x:x + tw] += wt
    return (out / weight).astype(img.dtype)
