"""Image-space metrics: MAE, PSNR, SSIM and MS-SSIM.

All functions take ``(N, 3, H, W)`` (or ``(3, H, W)``) tensors in ``[0, 1]``
and are differentiable with respect to both inputs.
"""

from __future__ import annotations

from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .base import HIGHER_BETTER, LOWER_BETTER, MetricResult, check_pair

PSNR_CAP_DB = 100.0
_MSE_FLOOR = 10.0 ** (-PSNR_CAP_DB / 10.0)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

REC709 = (0.2126, 0.7152, 0.0722)

PairTransform = Callable[[torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


def mae(R: torch.Tensor, D: torch.Tensor) -> MetricResult:
    R, D = check_pair(R, D)
    diff = (R - D).abs()
    return MetricResult(
        score=diff.mean(dim=(1, 2, 3)),
        error_map=diff.mean(dim=1, keepdim=True),
        orientation=LOWER_BETTER,
    )


def psnr(R: torch.Tensor, D: torch.Tensor) -> MetricResult:
    """PSNR with peak 1. Identical inputs report the 100 dB cap."""
    R, D = check_pair(R, D)
    sq = (R - D) ** 2
    mse = sq.mean(dim=(1, 2, 3))
    score = 10.0 * torch.log10(1.0 / mse.clamp_min(_MSE_FLOOR))
    return MetricResult(score=score, error_map=sq.mean(dim=1, keepdim=True), orientation=HIGHER_BETTER)


def luma(x: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(REC709, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float32) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def _ssim_maps(x: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Valid-region SSIM and contrast-structure maps of single-channel images."""
    win = gaussian_window(dtype=x.dtype).to(x.device)[None, None]
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_x = F.conv2d(x, win)
    mu_y = F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mu_x**2
    syy = F.conv2d(y * y, win) - mu_y**2
    sxy = F.conv2d(x * y, win) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    return lum * cs, cs


def _full_size(map_: torch.Tensor, pad: int) -> torch.Tensor:
    return F.pad(map_, (pad, pad, pad, pad), mode="replicate")


def ssim(R: torch.Tensor, D: torch.Tensor) -> MetricResult:
    """Single-scale SSIM on Rec.709 luma with an 11x11, sigma 1.5 Gaussian window.

    The score averages the valid-region map. The error map is ``1 - SSIM``
    padded (edge replicate) back to the input size.
    """
    R, D = check_pair(R, D)
    if min(R.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {tuple(R.shape[-2:])}")
    smap, _ = _ssim_maps(luma(R), luma(D))
    return MetricResult(
        score=smap.mean(dim=(1, 2, 3)),
        error_map=_full_size(1.0 - smap, SSIM_WINDOW // 2),
        orientation=HIGHER_BETTER,
    )


def ms_ssim(
    R: torch.Tensor,
    D: torch.Tensor,
    weights: tuple[float, ...] = MS_SSIM_WEIGHTS,
    scale_transform: Optional[PairTransform] = None,
) -> MetricResult:
    """Five-scale MS-SSIM with 2x2 mean-pool downsampling between scales.

    ``scale_transform`` is applied to the RGB pair at every scale before luma
    conversion; the enhanced metric uses it to mask each scale with one
    shared generator. Negative contrast terms are clipped at zero so that
    fractional exponents stay real.
    """
    R, D = check_pair(R, D)
    levels = len(weights)
    min_side = SSIM_WINDOW * 2 ** (levels - 1)
    if min(R.shape[-2:]) < min_side:
        raise ValueError(f"MS-SSIM needs images of at least {min_side}x{min_side}, got {tuple(R.shape[-2:])}")
    w = torch.tensor(weights, dtype=R.dtype, device=R.device)
    r, d = R, D
    terms = []
    first_map = None
    for level in range(levels):
        if level > 0:
            r = F.avg_pool2d(r, 2)
            d = F.avg_pool2d(d, 2)
        rr, dd = scale_transform(r, d) if scale_transform is not None else (r, d)
        smap, cs = _ssim_maps(luma(rr), luma(dd))
        if level == 0:
            first_map = smap
        value = smap if level == levels - 1 else cs
        terms.append(F.relu(value.mean(dim=(1, 2, 3))))
    stacked = torch.stack(terms, dim=1)
    score = torch.prod(stacked ** w.view(1, -1), dim=1)
    return MetricResult(
        score=score,
        error_map=_full_size(1.0 - first_map, SSIM_WINDOW // 2),
        orientation=HIGHER_BETTER,
    )
