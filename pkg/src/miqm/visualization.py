"""Render error maps and learned masks to 8-bit PNG files.

Error maps are colour-mapped with a shipped 256-entry magma ramp (dark = low
error). Unbounded maps first pass through ``2 * sigmoid(k * x) - 1``; the
slope ``k`` is chosen so that a chosen 95th-percentile error maps to 0.9,
and it is written to a JSON sidecar next to every image.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .metrics import MetricResult

TARGET_QUANTILE = 95.0
TARGET_LEVEL = 0.9
CONTRAST_FACTORS = (0.5, 1.0, 2.0)


@lru_cache(maxsize=1)
def magma_table() -> np.ndarray:
    """The shipped ``(256, 3)`` uint8 colour ramp."""
    text = resources.files("miqm.resources").joinpath("magma256.txt").read_text(encoding="utf-8")
    rows = [line.split() for line in text.splitlines() if line and not line.startswith("#")]
    table = np.array(rows, dtype=np.uint8)
    if table.shape != (256, 3):
        raise RuntimeError(f"colormap table has shape {table.shape}, expected (256, 3)")
    return table


@dataclass(frozen=True)
class RenderSpec:
    """How to turn a map into pixels.

    ``normalization`` is ``"none"`` (values already in ``[0, 1]``) or
    ``"sigmoid"``; with ``"sigmoid"`` and ``k=None`` the slope is calibrated
    from the map being rendered.
    """

    colormap: str = "magma"
    normalization: str = "none"
    k: Optional[float] = None

    def __post_init__(self):
        if self.colormap not in ("magma", "gray"):
            raise ValueError(f"unknown colormap {self.colormap!r}")
        if self.normalization not in ("none", "sigmoid"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.k is not None and not self.k > 0:
            raise ValueError(f"sigmoid slope must be positive, got {self.k}")


def sigmoid_normalize(x, k: float):
    """``2 * sigmoid(k * x) - 1``, i.e. ``tanh(k * x / 2)``; maps ``[0, inf)`` onto ``[0, 1)``."""
    if isinstance(x, torch.Tensor):
        return torch.tanh(k * x / 2.0)
    return np.tanh(k * np.asarray(x, dtype=np.float64) / 2.0)


def calibrate_slope(values, quantile: float = TARGET_QUANTILE, level: float = TARGET_LEVEL) -> float:
    """Slope ``k`` that sends the ``quantile``-th percentile of ``values`` to ``level``.

    ``values`` may be one map or a collection of maps (e.g. a training split).
    Falls back to ``k = 1`` when the percentile is zero.
    """
    if isinstance(values, (list, tuple)):
        flat = np.concatenate([_to_numpy(v).reshape(-1) for v in values])
    else:
        flat = _to_numpy(values).reshape(-1)
    p = float(np.percentile(flat, quantile))
    if not p > 0:
        return 1.0
    return 2.0 * math.atanh(level) / p


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def _single_map(m, index: int = 0) -> np.ndarray:
    arr = _to_numpy(m)
    if arr.ndim == 4:
        arr = arr[index]
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"expected a one-channel map, got shape {arr.shape}")
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"cannot interpret map of shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("map contains non-finite values")
    return arr


def quantize(values: np.ndarray) -> np.ndarray:
    """``[0, 1]`` floats to 0..255 indices (round half up, clipped)."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def colorize(values: np.ndarray, colormap: str = "magma") -> np.ndarray:
    idx = quantize(values)
    if colormap == "gray":
        return idx
    return magma_table()[idx]


def _write_png(path: Path, pixels: np.ndarray, sidecar: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path, format="PNG")
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    return path


def normalized_map(error_map, spec: RenderSpec) -> tuple[np.ndarray, Optional[float]]:
    arr = _single_map(error_map)
    if spec.normalization == "none":
        return np.clip(arr, 0.0, 1.0), None
    k = spec.k if spec.k is not None else calibrate_slope(arr)
    return sigmoid_normalize(np.maximum(arr, 0.0), k), k


def render_error_map(result: MetricResult | torch.Tensor | np.ndarray, spec: RenderSpec, path: str | Path,
                     index: int = 0) -> Path:
    """Colour-mapped error map (darker = lower error) plus a JSON sidecar."""
    emap = result.error_map if isinstance(result, MetricResult) else result
    if emap is None:
        raise ValueError("result has no error map to render")
    arr = _to_numpy(emap)
    if arr.ndim == 4:
        emap = arr[index]
    values, k = normalized_map(emap, spec)
    sidecar = {
        "kind": "error_map",
        "colormap": spec.colormap,
        "normalization": spec.normalization,
        "k": k,
        "target_quantile": TARGET_QUANTILE if spec.normalization == "sigmoid" else None,
        "target_level": TARGET_LEVEL if spec.normalization == "sigmoid" else None,
        "k_source": None if k is None else ("given" if spec.k is not None else "this map"),
        "raw_min": float(_single_map(emap).min()),
        "raw_max": float(_single_map(emap).max()),
    }
    return _write_png(Path(path), colorize(values, spec.colormap), sidecar)


def render_mask(mask, path: str | Path, index: int = 0) -> Path:
    """Grayscale mask render: 0 -> black, 1 -> white."""
    arr = _single_map(mask, index)
    sidecar = {"kind": "mask", "colormap": "gray", "normalization": "none", "k": None,
               "mean": float(arr.mean()), "min": float(arr.min()), "max": float(arr.max())}
    return _write_png(Path(path), quantize(arr), sidecar)


def scale_contrast(img: torch.Tensor, factor: float) -> torch.Tensor:
    """Scale about mid-gray and clip to ``[0, 1]``."""
    return (0.5 + factor * (img - 0.5)).clamp(0.0, 1.0)


def contrast_pair(R: torch.Tensor, D: torch.Tensor, factor: float, mode: str = "residual"):
    """Contrast-scaled pair.

    ``residual`` keeps the distortion ``D - R`` fixed and adds it to the scaled
    reference (the distortion level stays the same, only the content
    contrast changes); ``pair`` scales both images.
    """
    Rs = scale_contrast(R, factor)
    if mode == "residual":
        return Rs, (Rs + (D - R)).clamp(0.0, 1.0)
    if mode == "pair":
        return Rs, scale_contrast(D, factor)
    raise ValueError(f"contrast mode must be 'residual' or 'pair', got {mode!r}")


def contrast_sweep(E, R: torch.Tensor, D: torch.Tensor, factors: Sequence[float] = CONTRAST_FACTORS,
                   mode: str = "residual", out_dir: str | Path | None = None,
                   layer: str = "image") -> list[tuple[float, torch.Tensor, Optional[Path]]]:
    """Masks of an enhanced metric for contrast-scaled versions of one pair.

    Returns ``(factor, mask, path)`` triples; files are written only when
    ``out_dir`` is given.
    """
    out = []
    with torch.no_grad():
        for f in factors:
            r, d = contrast_pair(R, D, f, mode)
            mask = E(r, d).masks[layer]
            path = None
            if out_dir is not None:
                path = render_mask(mask, Path(out_dir) / f"mask_x{f:g}.png")
            out.append((f, mask, path))
    return out


def region_means(mask, regions: dict[str, np.ndarray]) -> dict[str, float]:
    arr = _single_map(mask)
    return {name: float(arr[sel].mean()) for name, sel in regions.items()}


def spec_dict(spec: RenderSpec) -> dict:
    return asdict(spec)
