"""Metric registry.

Image-space metrics are plain functions ``(R, D) -> MetricResult``; feature
metrics are classes built around frozen :class:`BackboneWeights`.
"""

from __future__ import annotations

from typing import Callable, Optional

from .base import HIGHER_BETTER, LOWER_BETTER, MetricResult, as_batch, check_pair
from .classic import mae, ms_ssim, psnr, ssim
from .deep import DISTS, LPIPS, VGGL1, FeatureMetric, extract_features
from .flip import DEFAULT_PPD, flip
from .weights import BackboneWeights, WeightsError

IMAGE_METRICS: dict[str, Callable[..., MetricResult]] = {
    "mae": mae,
    "psnr": psnr,
    "ssim": ssim,
    "ms-ssim": ms_ssim,
    "flip": flip,
}
FEATURE_METRICS: dict[str, type[FeatureMetric]] = {"vgg": VGGL1, "lpips": LPIPS, "dists": DISTS}
METRIC_IDS = tuple(IMAGE_METRICS) + tuple(FEATURE_METRICS)

ORIENTATION = {
    "mae": LOWER_BETTER,
    "psnr": HIGHER_BETTER,
    "ssim": HIGHER_BETTER,
    "ms-ssim": HIGHER_BETTER,
    "flip": LOWER_BETTER,
    "vgg": LOWER_BETTER,
    "lpips": LOWER_BETTER,
    "dists": LOWER_BETTER,
}

# metrics whose error maps are unbounded and need normalising before display
UNBOUNDED_MAPS = frozenset({"mae", "psnr", "vgg", "lpips"})


def canonical_metric(name: str) -> str:
    key = name.strip().lower().replace("_", "-")
    key = {"msssim": "ms-ssim", "vgg-l1": "vgg", "vggl1": "vgg"}.get(key, key)
    if key not in METRIC_IDS:
        raise KeyError(f"unknown metric {name!r}; choose from {', '.join(METRIC_IDS)}")
    return key


def is_feature_metric(name: str) -> bool:
    return canonical_metric(name) in FEATURE_METRICS


def get_metric(
    name: str,
    weights: Optional[BackboneWeights] = None,
    allow_equal_weights: bool = False,
    ppd: float = DEFAULT_PPD,
) -> Callable[..., MetricResult]:
    """Callable ``(R, D) -> MetricResult`` for a registered metric id."""
    key = canonical_metric(name)
    if key == "flip":
        return lambda R, D: flip(R, D, ppd)
    if key in IMAGE_METRICS:
        return IMAGE_METRICS[key]
    if key == "dists":
        return DISTS(weights, allow_equal_weights=allow_equal_weights)
    return FEATURE_METRICS[key](weights)


__all__ = [
    "BackboneWeights",
    "DEFAULT_PPD",
    "DISTS",
    "FEATURE_METRICS",
    "FeatureMetric",
    "HIGHER_BETTER",
    "IMAGE_METRICS",
    "LOWER_BETTER",
    "LPIPS",
    "METRIC_IDS",
    "MetricResult",
    "ORIENTATION",
    "UNBOUNDED_MAPS",
    "VGGL1",
    "WeightsError",
    "as_batch",
    "canonical_metric",
    "check_pair",
    "extract_features",
    "flip",
    "get_metric",
    "is_feature_metric",
    "mae",
    "ms_ssim",
    "psnr",
    "ssim",
]
