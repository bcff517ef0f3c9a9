"""VGG16 feature pyramids and the feature-space metrics VGG-L1, LPIPS and DISTS.

Each feature metric is split into ``features`` (image -> named pyramid) and
``compare`` (two pyramids -> :class:`MetricResult`). ``compare`` accepts a
``mask_fn(name, a, b) -> (a', b')`` hook that the enhanced metrics use to
weight every layer before the distance is taken.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .base import LOWER_BETTER, MetricResult, check_pair
from .weights import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    LAYER_CHANNELS,
    LAYER_NAMES,
    LPIPS_SCALE,
    LPIPS_SHIFT,
    VGG16_CONVS,
    BackboneWeights,
    WeightsError,
)

FeaturePyramid = dict[str, torch.Tensor]
MaskFn = Callable[[str, torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]

# features index after which each named ReLU output is tapped
_TAPS = {3: "relu1_2", 8: "relu2_2", 15: "relu3_3", 22: "relu4_3", 29: "relu5_3"}
_POOLS = (4, 9, 16, 23)


class L2Pool(nn.Module):
    """Hanning-windowed L2 pooling (stride 2) used by DISTS in place of max pooling."""

    def __init__(self, channels: int, filter_size: int = 5):
        super().__init__()
        a = np.hanning(filter_size)[1:-1]
        g = torch.tensor(a[:, None] * a[None, :], dtype=torch.float32)
        g = g / g.sum()
        self.padding = (filter_size - 2) // 2
        self.register_buffer("filter", g[None, None].repeat(channels, 1, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.conv2d(x**2, self.filter.to(x.dtype), stride=2, padding=self.padding, groups=x.shape[1])
        return (out + 1e-12).sqrt()


class VGGTrunk(nn.Module):
    """VGG16 convolutional trunk up to relu5_3 with frozen weights."""

    def __init__(self, weights: BackboneWeights, pooling: str = "max"):
        super().__init__()
        if pooling not in ("max", "l2"):
            raise ValueError(f"pooling must be 'max' or 'l2', got {pooling!r}")
        layers: list[nn.Module] = []
        cin = 3
        conv_iter = iter(VGG16_CONVS)
        next_conv = next(conv_iter)
        for idx in range(30):
            if idx == next_conv:
                w = weights.vgg[f"features.{idx}.weight"]
                conv = nn.Conv2d(cin, w.shape[0], 3, padding=1)
                conv.weight.data.copy_(w)
                conv.bias.data.copy_(weights.vgg[f"features.{idx}.bias"])
                layers.append(conv)
                cin = w.shape[0]
                next_conv = next(conv_iter, -1)
            elif idx in _POOLS:
                layers.append(nn.MaxPool2d(2, 2) if pooling == "max" else L2Pool(cin))
            else:
                layers.append(nn.ReLU(inplace=False))
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        out: FeaturePyramid = {}
        h = x
        for idx, layer in enumerate(self.layers):
            h = layer(h)
            if idx in _TAPS:
                out[_TAPS[idx]] = h
        return out


_TRUNKS: dict[tuple[int, str], VGGTrunk] = {}


def _trunk(weights: BackboneWeights, pooling: str) -> VGGTrunk:
    key = (id(weights), pooling)
    trunk = _TRUNKS.get(key)
    if trunk is None:
        trunk = VGGTrunk(weights, pooling)
        _TRUNKS[key] = trunk
    return trunk


def _normalise_input(img: torch.Tensor, normalization: str) -> torch.Tensor:
    if normalization == "imagenet":
        mean = torch.tensor(IMAGENET_MEAN, dtype=img.dtype, device=img.device).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD, dtype=img.dtype, device=img.device).view(1, 3, 1, 1)
        return (img - mean) / std
    if normalization == "lpips":
        shift = torch.tensor(LPIPS_SHIFT, dtype=img.dtype, device=img.device).view(1, 3, 1, 1)
        scale = torch.tensor(LPIPS_SCALE, dtype=img.dtype, device=img.device).view(1, 3, 1, 1)
        return (2 * img - 1 - shift) / scale
    raise ValueError(f"unknown input normalization {normalization!r}")


def extract_features(
    img: torch.Tensor,
    weights: BackboneWeights,
    normalization: str = "imagenet",
    pooling: str = "max",
) -> FeaturePyramid:
    """Five-layer VGG16 pyramid (relu1_2 ... relu5_3) of a ``[0, 1]`` image batch."""
    if weights is None:
        raise WeightsError("feature extraction needs backbone weights")
    x = img if img.dim() == 4 else img.unsqueeze(0)
    trunk = _trunk(weights, pooling)
    if trunk.layers[0].weight.dtype != x.dtype:
        trunk.to(x.dtype)
    return trunk(_normalise_input(x, normalization))


class FeatureMetric:
    """Base for metrics computed on a named feature pyramid."""

    id: str = ""
    normalization = "imagenet"
    pooling = "max"
    orientation = LOWER_BETTER

    def __init__(self, weights: BackboneWeights):
        if weights is None:
            raise WeightsError(f"{self.id} needs backbone weights (pass a weights manifest)")
        self.weights = weights

    @property
    def layers(self) -> tuple[str, ...]:
        return LAYER_NAMES

    @property
    def channels(self) -> dict[str, int]:
        return dict(zip(LAYER_NAMES, LAYER_CHANNELS))

    def features(self, x: torch.Tensor) -> FeaturePyramid:
        return extract_features(x, self.weights, self.normalization, self.pooling)

    def compare(self, fr: FeaturePyramid, fd: FeaturePyramid, mask_fn: Optional[MaskFn] = None) -> MetricResult:
        raise NotImplementedError

    def __call__(self, R: torch.Tensor, D: torch.Tensor, mask_fn: Optional[MaskFn] = None) -> MetricResult:
        R, D = check_pair(R, D)
        return self.compare(self.features(R), self.features(D), mask_fn)


class VGGL1(FeatureMetric):
    """Sum over layers of the mean absolute feature difference."""

    id = "vgg"

    def compare(self, fr, fd, mask_fn=None):
        total = 0.0
        maps = {}
        for name in self.layers:
            a, b = fr[name], fd[name]
            if mask_fn is not None:
                a, b = mask_fn(name, a, b)
            diff = (a - b).abs()
            total = total + diff.mean(dim=(1, 2, 3))
            maps[name] = diff.mean(dim=1, keepdim=True)
        return MetricResult(score=total, error_map=maps[self.layers[0]], orientation=LOWER_BETTER, layer_maps=maps)


def unit_normalize(x: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return x / (torch.sqrt((x**2).sum(dim=1, keepdim=True)) + eps)


class LPIPS(FeatureMetric):
    """LPIPS (VGG, v0.1): channel-unit-normalised features, learned channel weights.

    With a mask hook the mask multiplies the unit-normalised features, since
    a per-pixel scale applied before normalisation would cancel out.
    """

    id = "lpips"
    normalization = "lpips"

    def __init__(self, weights: BackboneWeights):
        super().__init__(weights)
        if weights.lpips_lin is None:
            raise WeightsError("LPIPS linear weights missing from the weights manifest")

    def compare(self, fr, fd, mask_fn=None):
        total = 0.0
        maps = {}
        for name, lin in zip(self.layers, self.weights.lpips_lin):
            a, b = unit_normalize(fr[name]), unit_normalize(fd[name])
            if mask_fn is not None:
                a, b = mask_fn(name, a, b)
            w = lin.to(a.dtype).view(1, -1, 1, 1)
            m = ((a - b) ** 2 * w).sum(dim=1, keepdim=True)
            total = total + m.mean(dim=(1, 2, 3))
            maps[name] = m
        return MetricResult(score=total, error_map=maps[self.layers[0]], orientation=LOWER_BETTER, layer_maps=maps)


class DISTS(FeatureMetric):
    """DISTS over the input image plus the five L2-pooled VGG stages.

    Without published alpha/beta weights, ``allow_equal_weights`` selects
    uniform weights over all channels of both terms.
    """

    id = "dists"
    pooling = "l2"
    C1 = 1e-6
    C2 = 1e-6

    def __init__(self, weights: BackboneWeights, allow_equal_weights: bool = False):
        super().__init__(weights)
        total = 3 + sum(LAYER_CHANNELS)
        if weights.dists_alpha is None or weights.dists_beta is None:
            if not allow_equal_weights:
                raise WeightsError("DISTS alpha/beta weights missing and equal-weight fallback not enabled")
            self.alpha = torch.ones(total)
            self.beta = torch.ones(total)
        else:
            self.alpha, self.beta = weights.dists_alpha, weights.dists_beta

    @property
    def layers(self):
        return ("input",) + LAYER_NAMES

    @property
    def channels(self):
        return {"input": 3, **dict(zip(LAYER_NAMES, LAYER_CHANNELS))}

    def features(self, x):
        x = x if x.dim() == 4 else x.unsqueeze(0)
        return {"input": x, **extract_features(x, self.weights, self.normalization, self.pooling)}

    def compare(self, fr, fd, mask_fn=None):
        chns = [self.channels[n] for n in self.layers]
        w_sum = self.alpha.sum() + self.beta.sum()
        alphas = torch.split(self.alpha / w_sum, chns)
        betas = torch.split(self.beta / w_sum, chns)
        structure = 0.0
        texture = 0.0
        for name, al, be in zip(self.layers, alphas, betas):
            a, b = fr[name], fd[name]
            if mask_fn is not None:
                a, b = mask_fn(name, a, b)
            al = al.to(a.dtype).view(1, -1)
            be = be.to(a.dtype).view(1, -1)
            ma = a.mean(dim=(2, 3))
            mb = b.mean(dim=(2, 3))
            s1 = (2 * ma * mb + self.C1) / (ma**2 + mb**2 + self.C1)
            va = ((a - ma[..., None, None]) ** 2).mean(dim=(2, 3))
            vb = ((b - mb[..., None, None]) ** 2).mean(dim=(2, 3))
            cov = (a * b).mean(dim=(2, 3)) - ma * mb
            s2 = (2 * cov + self.C2) / (va + vb + self.C2)
            structure = structure + (al * s1).sum(dim=1)
            texture = texture + (be * s2).sum(dim=1)
        return MetricResult(score=1 - (structure + texture), error_map=None, orientation=LOWER_BETTER)


def vgg_l1(R: torch.Tensor, D: torch.Tensor, weights: BackboneWeights) -> MetricResult:
    return VGGL1(weights)(R, D)


def lpips(R: torch.Tensor, D: torch.Tensor, weights: BackboneWeights) -> MetricResult:
    return LPIPS(weights)(R, D)


def dists(R: torch.Tensor, D: torch.Tensor, weights: BackboneWeights, allow_equal_weights: bool = False) -> MetricResult:
    return DISTS(weights, allow_equal_weights)(R, D)
