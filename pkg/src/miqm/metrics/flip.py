"""Differentiable LDR-FLIP.

Colour pipeline: sRGB -> YCxCz, CSF filtering, clamp in linear RGB,
Hunt-adjusted L*a*b*, HyAB distance, redistribution to [0, 1].
Feature pipeline: edge/point detectors on normalised achromatic channel.
The per-pixel error is ``deltaE_c ** (1 - deltaE_f)``.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from .base import LOWER_BETTER, MetricResult, check_pair

DEFAULT_PPD = 67.0

_QC = 0.7
_QF = 0.5
_PC = 0.4
_PT = 0.95
_EDGE_W = 0.082

_WHITE = (0.950428545, 1.0, 1.088900371)

_LIN2XYZ = (
    (10135552 / 24577794, 8788810 / 24577794, 4435075 / 24577794),
    (2613072 / 12288897, 8788810 / 12288897, 887015 / 12288897),
    (1425312 / 73733382, 8788810 / 73733382, 70074185 / 73733382),
)
_XYZ2LIN = (
    (3.241003275, -1.537398934, -0.498615861),
    (-0.969224334, 1.875930071, 0.041554224),
    (0.055639423, -0.204011202, 1.057148933),
)

# (a1, b1, a2, b2) of the channel CSFs
_CSF = {
    "A": (1.0, 0.0047, 0.0, 1e-5),
    "RG": (1.0, 0.0053, 0.0, 1e-5),
    "BY": (34.1, 0.04, 13.5, 0.025),
}


def _safe_pow(x: torch.Tensor, q) -> torch.Tensor:
    """``x ** q`` for ``x >= 0`` with exact zeros and zero (not NaN) gradient at 0."""
    pos = x > 0
    return torch.where(pos, torch.where(pos, x, torch.ones_like(x)) ** q, torch.zeros_like(x))


def _mat(x: torch.Tensor, m) -> torch.Tensor:
    a = torch.tensor(m, dtype=x.dtype, device=x.device)
    return torch.einsum("ij,njhw->nihw", a, x)


def _white(x: torch.Tensor) -> torch.Tensor:
    return torch.tensor(_WHITE, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)


def srgb_to_linear(x: torch.Tensor) -> torch.Tensor:
    return torch.where(x > 0.04045, ((x.clamp_min(0.04045) + 0.055) / 1.055) ** 2.4, x / 12.92)


def xyz_to_ycxcz(xyz: torch.Tensor) -> torch.Tensor:
    v = xyz / _white(xyz)
    y = 116 * v[:, 1:2] - 16
    cx = 500 * (v[:, 0:1] - v[:, 1:2])
    cz = 200 * (v[:, 1:2] - v[:, 2:3])
    return torch.cat((y, cx, cz), dim=1)


def ycxcz_to_xyz(ycc: torch.Tensor) -> torch.Tensor:
    y = (ycc[:, 0:1] + 16) / 116
    cx = ycc[:, 1:2] / 500
    cz = ycc[:, 2:3] / 200
    return torch.cat((y + cx, y, y - cz), dim=1) * _white(ycc)


def xyz_to_lab(xyz: torch.Tensor) -> torch.Tensor:
    v = xyz / _white(xyz)
    delta = 6 / 29
    cube = delta**3
    f = torch.where(v > cube, v.clamp_min(cube) ** (1 / 3), v / (3 * delta**2) + 4 / 29)
    lum = 116 * f[:, 1:2] - 16
    a = 500 * (f[:, 0:1] - f[:, 1:2])
    b = 200 * (f[:, 1:2] - f[:, 2:3])
    return torch.cat((lum, a, b), dim=1)


def srgb_to_ycxcz(x: torch.Tensor) -> torch.Tensor:
    return xyz_to_ycxcz(_mat(srgb_to_linear(x), _LIN2XYZ))


def hunt_adjust(lab: torch.Tensor) -> torch.Tensor:
    lum = lab[:, 0:1]
    return torch.cat((lum, 0.01 * lum * lab[:, 1:3]), dim=1)


def hyab(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d = a - b
    chroma = _safe_pow((d[:, 1:3] ** 2).sum(dim=1, keepdim=True), 0.5)
    return d[:, 0:1].abs() + chroma


@lru_cache(maxsize=16)
def _csf_kernels(ppd: float) -> np.ndarray:
    """Three stacked, normalised CSF kernels for the YCxCz channels."""
    max_b = max(max(p[1], p[3]) for p in _CSF.values())
    r = int(math.ceil(3 * math.sqrt(max_b / (2 * math.pi**2)) * ppd))
    dx = 1.0 / ppd
    xs, ys = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
    z = (xs * dx) ** 2 + (ys * dx) ** 2
    kernels = []
    for name in ("A", "RG", "BY"):
        a1, b1, a2, b2 = _CSF[name]
        s = a1 * np.sqrt(np.pi / b1) * np.exp(-(np.pi**2) * z / b1) + a2 * np.sqrt(np.pi / b2) * np.exp(
            -(np.pi**2) * z / b2
        )
        kernels.append(s / s.sum())
    return np.stack(kernels)


@lru_cache(maxsize=16)
def _feature_kernels(ppd: float) -> tuple[np.ndarray, np.ndarray]:
    sd = 0.5 * _EDGE_W * ppd
    radius = int(math.ceil(3 * sd))
    xs, ys = np.meshgrid(np.arange(-radius, radius + 1), np.arange(-radius, radius + 1))
    g = np.exp(-(xs**2 + ys**2) / (2 * sd * sd))
    edge = -xs * g
    point = (xs**2 / (sd * sd) - 1) * g
    out = []
    for k in (edge, point):
        neg = -k[k < 0].sum()
        pos = k[k > 0].sum()
        out.append(np.where(k < 0, k / neg, k / pos))
    return out[0], out[1]


def _filter(x: torch.Tensor, kernels: np.ndarray) -> torch.Tensor:
    """Per-channel 2-D correlation with edge-replicate borders."""
    k = torch.as_tensor(kernels, dtype=x.dtype, device=x.device)
    if k.dim() == 2:
        k = k.unsqueeze(0)
    c = x.shape[1]
    k = k.expand(c, -1, -1) if k.shape[0] == 1 else k
    r = k.shape[-1] // 2
    xp = F.pad(x, (r, r, r, r), mode="replicate")
    return F.conv2d(xp, k.unsqueeze(1), groups=c)


def _cmax(dtype, device) -> float:
    green = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64).view(1, 3, 1, 1)
    blue = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64).view(1, 3, 1, 1)
    g = hunt_adjust(xyz_to_lab(_mat(green, _LIN2XYZ)))
    b = hunt_adjust(xyz_to_lab(_mat(blue, _LIN2XYZ)))
    d = g - b
    dist = d[:, 0:1].abs() + torch.sqrt((d[:, 1:3] ** 2).sum(dim=1, keepdim=True))
    return float(dist.item() ** _QC)


def _redistribute(power_err: torch.Tensor, cmax: float) -> torch.Tensor:
    pccmax = _PC * cmax
    return torch.where(
        power_err < pccmax,
        (_PT / pccmax) * power_err,
        _PT + ((power_err - pccmax) / (cmax - pccmax)) * (1.0 - _PT),
    )


def flip_map(R: torch.Tensor, D: torch.Tensor, ppd: float = DEFAULT_PPD) -> torch.Tensor:
    """Per-pixel FLIP error ``(N, 1, H, W)`` in ``[0, 1]``."""
    R, D = check_pair(R, D)
    if not ppd > 0:
        raise ValueError(f"pixels per degree must be positive, got {ppd}")
    R = R.clamp(0.0, 1.0)
    D = D.clamp(0.0, 1.0)
    ref = srgb_to_ycxcz(R)
    test = srgb_to_ycxcz(D)

    csf = _csf_kernels(float(ppd))

    def colour(ycc: torch.Tensor) -> torch.Tensor:
        lin = _mat(ycxcz_to_xyz(_filter(ycc, csf)), _XYZ2LIN).clamp(0.0, 1.0)
        return hunt_adjust(xyz_to_lab(_mat(lin, _LIN2XYZ)))

    delta_hyab = hyab(colour(ref), colour(test))
    delta_c = _redistribute(_safe_pow(delta_hyab, _QC), _cmax(R.dtype, R.device))

    edge_k, point_k = _feature_kernels(float(ppd))

    def features(ycc: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        y = (ycc[:, 0:1] + 16) / 116
        ex = _filter(y, edge_k)
        ey = _filter(y, edge_k.T)
        px = _filter(y, point_k)
        py = _filter(y, point_k.T)
        edge = _safe_pow(ex**2 + ey**2, 0.5)
        point = _safe_pow(px**2 + py**2, 0.5)
        return edge, point

    er, pr = features(ref)
    et, pt = features(test)
    delta_f = torch.maximum((er - et).abs(), (pt - pr).abs())
    delta_f = _safe_pow((1 / math.sqrt(2)) * delta_f, _QF)

    return _safe_pow(delta_c, 1.0 - delta_f)


def flip(R: torch.Tensor, D: torch.Tensor, ppd: float = DEFAULT_PPD) -> MetricResult:
    emap = flip_map(R, D, ppd)
    return MetricResult(score=emap.mean(dim=(1, 2, 3)), error_map=emap, orientation=LOWER_BETTER)
