"""Tiny on-disk datasets in the KADID / TID2013 layouts with synthetic scores.

Each reference is half band-limited texture, half smooth ramp (contrast and
orientation vary per reference). Distortions are additive Gaussian noise
(KADID type 11 / TID type 1) confined to either the textured or the flat
half, and Gaussian blur (KADID type 1 / TID type 8), at increasing levels.

Scores come from a simple contrast-masking observer: the absolute error is
divided by ``1 + gain * local_std(reference)`` before averaging, so noise on
texture is forgiven while the same noise on flat areas is not. Plain MAE
ignores this, so a learned mask has something to learn.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

NOISE_SIGMAS = (0.02, 0.04, 0.07, 0.10, 0.14)
BLUR_SIGMAS = (0.6, 1.0, 1.6, 2.4, 3.4)


def reference_image(seed: int, size: int = 48, with_region: bool = False):
    """Reference image; with ``with_region`` also the boolean textured-region mask."""
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(size, size))
    tex = ndimage.gaussian_filter(base, 0.8) + 0.6 * ndimage.gaussian_filter(base, 2.0)
    tex = tex / (np.abs(tex).max() + 1e-12)
    contrast = rng.uniform(0.15, 0.45)
    img = np.empty((size, size))
    cut = int(size * rng.uniform(0.35, 0.65))
    img[:, :cut] = 0.5 + contrast * tex[:, :cut]
    img[:, cut:] = np.linspace(0.4, 0.6, size - cut)[None, :] + rng.uniform(-0.1, 0.1)
    textured = np.zeros((size, size), bool)
    textured[:, :cut] = True
    if rng.random() < 0.5:
        img, textured = img.T.copy(), textured.T.copy()
    tint = 1.0 + 0.06 * rng.uniform(-1, 1, size=3)
    img = np.clip(img[..., None] * tint[None, None, :], 0.0, 1.0)
    return (img, textured) if with_region else img


def distort(ref: np.ndarray, kind: str, level: int, seed: int, region: np.ndarray | None = None) -> np.ndarray:
    """Noise lands only inside ``region`` when given (else everywhere)."""
    rng = np.random.default_rng(seed)
    if kind == "noise":
        noise = rng.normal(0.0, NOISE_SIGMAS[level - 1], size=ref.shape)
        if region is not None:
            noise = noise * region[..., None]
        out = ref + noise
    elif kind == "blur":
        out = np.stack([ndimage.gaussian_filter(ref[..., c], BLUR_SIGMAS[level - 1], mode="nearest")
                        for c in range(3)], axis=-1)
    else:
        raise ValueError(kind)
    return np.clip(out, 0.0, 1.0)


def _q(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0, 1) * 255).astype(np.uint8)


def masked_visibility(ref: np.ndarray, dist: np.ndarray, gain: float = 25.0) -> float:
    lum_r = ref.mean(-1)
    mean = ndimage.uniform_filter(lum_r, 5)
    local_std = np.sqrt(np.maximum(ndimage.uniform_filter(lum_r**2, 5) - mean**2, 0.0))
    err = np.abs(dist - ref).mean(-1)
    return float((err / (1.0 + gain * local_std)).mean())


def quality(ref: np.ndarray, dist: np.ndarray) -> float:
    """Synthetic MOS in [1, 5], higher = better."""
    v = masked_visibility(ref, dist)
    return float(1.0 + 4.0 * np.exp(-v / 0.012))


def _entries(n_refs: int, levels, kinds, seed: int, size: int):
    for r in range(n_refs):
        img, textured = reference_image(seed * 1000 + r, size, with_region=True)
        ref = _q(img).astype(np.float64) / 255
        for kind in kinds:
            for level in levels:
                s = seed * 100000 + r * 100 + level + (50 if kind == "blur" else 0)
                # noise goes on the textured part or the flat part, alternating by level and reference
                region = textured if (r + level) % 2 == 0 else ~textured
                dist = _q(distort(ref, kind, level, s, region if kind == "noise" else None))
                yield r, ref, kind, level, dist.astype(np.float64) / 255


def make_kadid_like(root: str | Path, n_refs: int = 6, levels=(1, 2, 3, 4, 5), kinds=("noise", "blur"),
                    seed: int = 0, size: int = 48) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    type_id = {"blur": 1, "noise": 11}
    rows = []
    for r, ref, kind, level, dist in _entries(n_refs, levels, kinds, seed, size):
        ref_name = f"I{r + 1:02d}.png"
        Image.fromarray(_q(ref)).save(root / "images" / ref_name)
        name = f"I{r + 1:02d}_{type_id[kind]:02d}_{level:02d}.png"
        Image.fromarray(_q(dist)).save(root / "images" / name)
        rows.append({"dist_img": name, "ref_img": ref_name, "dmos": f"{quality(ref, dist):.6f}", "var": "0"})
    with open(root / "dmos.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=("dist_img", "ref_img", "dmos", "var"))
        w.writeheader()
        w.writerows(rows)
    return root


def make_tid_like(root: str | Path, n_refs: int = 4, levels=(1, 2, 3, 4, 5), kinds=("noise", "blur"),
                  seed: int = 7, size: int = 48) -> Path:
    root = Path(root)
    (root / "reference_images").mkdir(parents=True, exist_ok=True)
    (root / "distorted_images").mkdir(parents=True, exist_ok=True)
    type_id = {"noise": 1, "blur": 8}
    lines = []
    for r, ref, kind, level, dist in _entries(n_refs, levels, kinds, seed, size):
        Image.fromarray(_q(ref)).save(root / "reference_images" / f"I{r + 1:02d}.BMP", format="BMP")
        name = f"i{r + 1:02d}_{type_id[kind]:02d}_{level}.bmp"
        Image.fromarray(_q(dist)).save(root / "distorted_images" / name, format="BMP")
        # TID MOS scale is 0..9
        lines.append(f"{(quality(ref, dist) - 1.0) * 9.0 / 4.0:.5f} {name}")
    (root / "mos_with_names.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def make_image_folder(root: str | Path, n: int = 4, size: int = 48, seed: int = 3) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        Image.fromarray(_q(reference_image(seed * 100 + i, size))).save(root / f"img{i:02d}.png")
    return root
