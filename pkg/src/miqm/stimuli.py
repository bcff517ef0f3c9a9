"""Deterministic probe stimuli for inspecting learned masks.

* ``noise_composite``: left half high-contrast texture, right half a smooth
  gradient, both corrupted by the same i.i.d. Gaussian noise.
* ``blur_chart``: sharp high-contrast blocks on a flat background, Gaussian
  blurred.

Each returns ``(R, D, regions)`` with ``(3, H, W)`` tensors and boolean
region masks used for region statistics.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy import ndimage


def _texture(rng: np.random.Generator, h: int, w: int, contrast: float = 0.35) -> np.ndarray:
    # band-limited noise: white noise smoothed at two scales, then stretched
    base = rng.normal(size=(h, w))
    tex = ndimage.gaussian_filter(base, 1.0) + 0.5 * ndimage.gaussian_filter(base, 2.5)
    tex = tex / (np.abs(tex).max() + 1e-12)
    return 0.5 + contrast * tex


def noise_composite(size: int = 96, seed: int = 0, sigma: float = 0.06, border: int = 6):
    """Textured/flat composite with additive noise. Regions exclude a seam band."""
    rng = np.random.default_rng(seed)
    h = w = size
    half = w // 2
    ref = np.empty((h, w), dtype=np.float64)
    ref[:, :half] = _texture(rng, h, half)
    ramp = np.linspace(0.45, 0.55, w - half)
    ref[:, half:] = ramp[None, :]
    tint = 1.0 + 0.05 * rng.uniform(-1.0, 1.0, size=3)
    R = np.clip(ref[None] * tint[:, None, None], 0.0, 1.0)
    D = np.clip(R + rng.normal(0.0, sigma, size=R.shape), 0.0, 1.0)
    textured = np.zeros((h, w), bool)
    flat = np.zeros((h, w), bool)
    textured[border:-border, border:half - border] = True
    flat[border:-border, half + border:w - border] = True
    regions = {"textured": textured, "flat": flat}
    return torch.from_numpy(R).float(), torch.from_numpy(D).float(), regions


def blur_chart(size: int = 96, seed: int = 0, blur_sigma: float = 1.5, edge_width: int = 2, flat_gap: int = 6):
    """High-contrast blocks on flat gray; ``edges`` are pixels near block borders."""
    rng = np.random.default_rng(seed)
    img = np.full((size, size), 0.5)
    occupied = np.zeros((size, size), bool)
    for _ in range(6):
        bh, bw = rng.integers(size // 8, size // 4, size=2)
        y, x = rng.integers(4, size - 4 - bh), rng.integers(4, size - 4 - bw)
        img[y:y + bh, x:x + bw] = rng.choice([0.05, 0.95])
        occupied[y:y + bh, x:x + bw] = True
    R = np.repeat(img[None], 3, axis=0)
    D = np.stack([ndimage.gaussian_filter(c, blur_sigma, mode="nearest") for c in R])
    gy, gx = np.gradient(img)
    boundary = np.hypot(gx, gy) > 0
    edges = ndimage.binary_dilation(boundary, iterations=edge_width)
    near = ndimage.binary_dilation(boundary | occupied, iterations=flat_gap)
    flat = ~near
    flat[:4, :] = flat[-4:, :] = False
    flat[:, :4] = flat[:, -4:] = False
    regions = {"edges": edges, "flat": flat}
    return torch.from_numpy(R).float(), torch.from_numpy(D).float(), regions
