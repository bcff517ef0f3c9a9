"""Learned visual-masking weights for full-reference metrics.

A small CNN ``G`` looks at a (reference, distorted) pair and predicts a
per-pixel weight ``M`` in (0, 1). The base metric is then evaluated on
``(M * R, M * D)``. For feature metrics every pyramid layer gets its own
generator, fed with that layer's features; MS-SSIM shares one generator
across all scales. During training a scalar MLP ``S`` maps the metric
output onto the MOS range; ``S`` is dropped at inference.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import torch
import torch.nn as nn

from .metrics import (
    FEATURE_METRICS,
    ORIENTATION,
    BackboneWeights,
    MetricResult,
    canonical_metric,
    check_pair,
    get_metric,
    ms_ssim,
)
from .metrics.flip import DEFAULT_PPD

INIT_SCHEME = "fan-in uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias"
IDENTITY_BIAS = 20.0


class TrainingStepError(RuntimeError):
    """A loss or metric value went non-finite; names the offending batch."""

    def __init__(self, message: str, batch: Optional[list] = None):
        super().__init__(message if batch is None else f"{message} (batch: {batch})")
        self.batch = batch


def _init_(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                m.bias.zero_()


class MaskGenerator(nn.Module):
    """Three 3x3 conv + ReLU layers of ``width`` channels, then a 1-channel conv + Sigmoid."""

    def __init__(self, channels: int = 3, width: int = 64, depth: int = 3):
        super().__init__()
        self.channels = channels
        layers: list[nn.Module] = []
        cin = 2 * channels
        for _ in range(depth):
            layers += [nn.Conv2d(cin, width, 3, padding=1), nn.ReLU()]
            cin = width
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, 1, 3, padding=1)

    def forward(self, R: torch.Tensor, D: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.head(self.body(torch.cat((R, D), dim=1))))


class ScalerNetwork(nn.Module):
    """FC 1 -> 32 -> 32 -> 1 with ReLU, ReLU, Sigmoid. Training only."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(1, width), nn.ReLU(),
            nn.Linear(width, width), nn.ReLU(),
            nn.Linear(width, 1), nn.Sigmoid(),
        )

    def forward(self, score: torch.Tensor) -> torch.Tensor:
        return self.net(score.reshape(-1, 1)).reshape(score.shape)


def predict_mask(G: MaskGenerator, R: torch.Tensor, D: torch.Tensor) -> torch.Tensor:
    """Mask ``(N, 1, H, W)`` in (0, 1) for a pair of ``(N, C, H, W)`` tensors."""
    R, D = check_pair(R, D)
    if R.shape[1] != G.channels:
        raise ValueError(f"mask generator expects {G.channels} channels per input, got {R.shape[1]}")
    return G(R, D)


def apply_mask(M: torch.Tensor, R: torch.Tensor, D: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """``(M * R, M * D)`` with the one-channel mask broadcast over channels."""
    if M.dim() == 3:
        M = M.unsqueeze(0)
    if R.shape != D.shape:
        raise ValueError(f"shape mismatch: {tuple(R.shape)} vs {tuple(D.shape)}")
    if M.shape[-2:] != R.shape[-2:]:
        raise ValueError(f"mask size {tuple(M.shape[-2:])} does not match inputs {tuple(R.shape[-2:])}")
    if M.shape[1] != 1:
        raise ValueError(f"mask must have one channel, got {M.shape[1]}")
    return M * R, M * D


def scaler_forward(S: ScalerNetwork, score: torch.Tensor | float) -> torch.Tensor:
    return S(torch.as_tensor(score, dtype=torch.float32))


class EnhancedMetric(nn.Module):
    """A base metric with learned masks applied to its inputs (or per-layer features).

    Only the generators and the scaler are registered as parameters; the base
    metric (and any backbone it holds) stays outside the module so no
    optimizer can reach it.
    """

    def __init__(
        self,
        metric: str,
        weights: Optional[BackboneWeights] = None,
        seed: int = 0,
        allow_equal_weights: bool = False,
        ppd: float = DEFAULT_PPD,
    ):
        super().__init__()
        self.metric_id = canonical_metric(metric)
        self.init_seed = int(seed)
        self.orientation = ORIENTATION[self.metric_id]
        self.base = get_metric(self.metric_id, weights, allow_equal_weights=allow_equal_weights, ppd=ppd)
        if self.metric_id in FEATURE_METRICS:
            self.layer_names = tuple(self.base.layers)
            chans = self.base.channels
            self.generators = nn.ModuleDict({n: MaskGenerator(chans[n]) for n in self.layer_names})
        else:
            self.layer_names = ("image",)
            self.generators = nn.ModuleDict({"image": MaskGenerator(3)})
        self.scaler = ScalerNetwork()
        gen = torch.Generator().manual_seed(self.init_seed)
        for name in self.layer_names:
            _init_(self.generators[name], gen)
        _init_(self.scaler, gen)

    @property
    def is_feature_metric(self) -> bool:
        return self.metric_id in FEATURE_METRICS

    def forward(self, R: torch.Tensor, D: torch.Tensor) -> MetricResult:
        return enhanced_score(self, R, D)

    def base_score(self, R: torch.Tensor, D: torch.Tensor) -> MetricResult:
        return self.base(R, D)


def _masking_hook(E: EnhancedMetric, store: dict) -> Callable:
    def hook(name: str, a: torch.Tensor, b: torch.Tensor):
        M = predict_mask(E.generators[name], a, b)
        store[name] = M
        return apply_mask(M, a, b)

    return hook


def enhanced_score(E: EnhancedMetric, R: torch.Tensor, D: torch.Tensor) -> MetricResult:
    """Base metric evaluated on masked inputs (image metrics) or masked features."""
    R, D = check_pair(R, D)
    masks: dict[str, torch.Tensor] = {}
    if E.is_feature_metric:
        hook = _masking_hook(E, masks)
        result = E.base.compare(E.base.features(R), E.base.features(D), hook)
    elif E.metric_id == "ms-ssim":
        G = E.generators["image"]
        scale = [0]

        def per_scale(r, d):
            M = predict_mask(G, r, d)
            masks[f"scale{scale[0] + 1}"] = M
            scale[0] += 1
            return apply_mask(M, r, d)

        result = ms_ssim(R, D, scale_transform=per_scale)
        masks["image"] = masks["scale1"]
    else:
        M = predict_mask(E.generators["image"], R, D)
        masks["image"] = M
        result = E.base(*apply_mask(M, R, D))
    result.masks = masks
    return result


def training_loss(
    E: EnhancedMetric,
    R: torch.Tensor,
    D: torch.Tensor,
    mos: torch.Tensor,
    batch: Optional[list] = None,
) -> torch.Tensor:
    """Mean over the batch of ``(S(enhanced score) - mos)^2``."""
    mos = torch.as_tensor(mos, dtype=R.dtype).reshape(-1)
    score = enhanced_score(E, R, D).score
    if not torch.isfinite(score).all():
        raise TrainingStepError("non-finite metric score", batch)
    pred = E.scaler(score)
    loss = ((pred - mos) ** 2).mean()
    if not torch.isfinite(loss):
        raise TrainingStepError("non-finite loss", batch)
    return loss


def force_mask_output(E: EnhancedMetric, bias: float = IDENTITY_BIAS) -> EnhancedMetric:
    """Zero every generator's output weights and set its bias, so ``M = sigmoid(bias)``."""
    with torch.no_grad():
        for G in E.generators.values():
            G.head.weight.zero_()
            G.head.bias.fill_(bias)
    return E
