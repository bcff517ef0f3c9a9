from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

LOWER_BETTER = "lower_better"
HIGHER_BETTER = "higher_better"


@dataclass
class MetricResult:
    """Per-sample scores ``(N,)`` plus an optional ``(N, 1, H, W)`` error map.

    Error maps always read "larger = more visible error", so metrics whose
    score is higher-better expose ``1 - local score``. Enhanced metrics also
    return the masks they applied, keyed by layer (or ``"image"``).
    """

    score: torch.Tensor
    error_map: Optional[torch.Tensor] = None
    orientation: str = LOWER_BETTER
    layer_maps: dict[str, torch.Tensor] = field(default_factory=dict)
    masks: dict[str, torch.Tensor] = field(default_factory=dict)

    def item(self) -> float:
        if self.score.numel() != 1:
            raise ValueError(f"item() needs a single-sample result, got {self.score.numel()} scores")
        return float(self.score.reshape(()).item())

    @property
    def higher_better(self) -> bool:
        return self.orientation == HIGHER_BETTER


def as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        return x.unsqueeze(0)
    if x.dim() != 4:
        raise ValueError(f"expected (C, H, W) or (N, C, H, W) tensor, got shape {tuple(x.shape)}")
    return x


def check_pair(r: torch.Tensor, d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    r, d = as_batch(r), as_batch(d)
    if r.shape != d.shape:
        raise ValueError(f"shape mismatch: reference {tuple(r.shape)} vs distorted {tuple(d.shape)}")
    return r, d
