"""Loss-function experiment: a small blind Gaussian denoiser trained with MAE or E-MAE.

The denoiser is the usual residual CNN (17 conv layers, 64 channels, batch
norm in the middle layers) that predicts the noise and subtracts it. Noise
is added in ``[0, 1]`` space with a standard deviation drawn per patch from
``sigma_range / 255``.

With ``loss="e-mae"`` the training objective is the masked MAE of an
enhanced-metric checkpoint, ``MAE(M * clean, M * denoised)`` with
``M = G(clean, denoised)``. The checkpoint is loaded frozen: gradients flow
through the mask generator into the denoiser, but the generator and scaler
weights never change (verified by hashing them before and after).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import CheckpointError, load_enhanced, read_tensors, write_tensors
from .data import load_image
from .masking import EnhancedMetric, enhanced_score
from .metrics import BackboneWeights, get_metric
from .metrics.classic import mae, psnr, ssim
from .plots import plot_denoise

log = logging.getLogger(__name__)

LOSSES = ("mae", "e-mae")
SIGMA_MAX = 50.0
EVAL_SIGMAS = (15, 25, 50, 60)
REPORT_COLUMNS = ("loss", "seed", "sigma", "psnr", "ssim", "lpips", "e_mae")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class DenoiseError(RuntimeError):
    pass


@dataclass
class DenoiseConfig:
    loss: str = "mae"
    train_root: Optional[str] = None
    emae_checkpoint: Optional[str] = None
    epochs: int = 10
    seed: int = 0
    sigma_range: tuple[float, float] = (0.0, SIGMA_MAX)
    patch_size: int = 40
    patches_per_epoch: int = 512
    batch_size: int = 16
    learning_rate: float = 1e-3
    depth: int = 17
    width: int = 64
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        lo, hi = (float(v) for v in self.sigma_range)
        if not 0.0 <= lo <= hi <= SIGMA_MAX:
            raise ValueError(f"sigma_range must satisfy 0 <= lo <= hi <= {SIGMA_MAX}, got {self.sigma_range}")
        self.sigma_range = (lo, hi)
        for name in ("epochs", "patch_size", "patches_per_epoch", "batch_size", "depth", "width"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.depth < 3:
            raise ValueError("depth must be at least 3")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_range"] = list(self.sigma_range)
        return d


class DnCNN(nn.Module):
    """conv-ReLU, (depth-2) x conv-BN-ReLU, conv; output ``x - residual``."""

    def __init__(self, channels: int = 3, depth: int = 17, width: int = 64):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(channels, width, 3, padding=1), nn.ReLU(inplace=True)]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(width, width, 3, padding=1, bias=False), nn.BatchNorm2d(width), nn.ReLU(inplace=True)]
        layers.append(nn.Conv2d(width, channels, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x - self.body(x)


def init_denoiser(model: DnCNN, seed: int) -> DnCNN:
    """Kaiming-normal conv weights from a seeded generator; BN at identity."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
    return model


def list_images(root: str | Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DenoiseError(f"image directory not found: {root}")
    paths = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise DenoiseError(f"no images under {root}")
    return paths


def sample_patches(images: Sequence[torch.Tensor], n: int, size: int, rng: np.random.Generator) -> torch.Tensor:
    """``n`` random ``size x size`` crops (with random flips) from the given images."""
    out = []
    usable = [im for im in images if min(im.shape[-2:]) >= size]
    if not usable:
        raise DenoiseError(f"no training image is at least {size} pixels on its short side")
    for _ in range(n):
        im = usable[int(rng.integers(len(usable)))]
        h, w = im.shape[-2:]
        y, x = int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1))
        p = im[:, y:y + size, x:x + size]
        if rng.random() < 0.5:
            p = p.flip(-1)
        if rng.random() < 0.5:
            p = p.flip(-2)
        out.append(p)
    return torch.stack(out)


def sample_sigmas(n: int, sigma_range: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    """Per-patch noise levels on the 8-bit scale, uniform in ``sigma_range``."""
    return rng.uniform(sigma_range[0], sigma_range[1], size=n)


def add_noise(x: torch.Tensor, sigma255, generator: torch.Generator) -> torch.Tensor:
    """Additive Gaussian noise with per-sample std ``sigma255 / 255`` (no clipping)."""
    s = torch.as_tensor(np.asarray(sigma255, dtype=np.float32) / 255.0).reshape(-1, 1, 1, 1)
    return x + s * torch.randn(x.shape, generator=generator)


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def load_frozen_emae(path: Optional[str | Path]) -> EnhancedMetric:
    if path is None or not Path(path).exists():
        raise DenoiseError(f"E-MAE loss needs an enhanced MAE checkpoint; not found: {path}")
    try:
        E = load_enhanced(path)
    except CheckpointError as exc:
        raise DenoiseError(str(exc)) from exc
    if E.metric_id != "mae":
        raise DenoiseError(f"{path} is an enhanced {E.metric_id!r} checkpoint, expected 'mae'")
    return E


def denoise_loss(kind: str, clean: torch.Tensor, out: torch.Tensor, E: Optional[EnhancedMetric] = None) -> torch.Tensor:
    if kind == "mae":
        return mae(clean, out).score.mean()
    return enhanced_score(E, clean, out).score.mean()


def save_denoiser(path: str | Path, model: DnCNN, config: DenoiseConfig, extra: Optional[dict] = None) -> Path:
    header = {"kind": "denoiser", "config": config.to_dict(), "channels": 3}
    if extra:
        header["extra"] = extra
    return write_tensors(path, dict(model.state_dict()), header)


def load_denoiser(path: str | Path) -> tuple[DnCNN, dict]:
    manifest, tensors = read_tensors(path)
    if manifest.get("kind") != "denoiser":
        raise CheckpointError(f"{path}: not a denoiser checkpoint (kind={manifest.get('kind')!r})")
    cfg = manifest["config"]
    model = DnCNN(manifest.get("channels", 3), cfg["depth"], cfg["width"])
    model.load_state_dict(tensors)
    model.eval()
    return model, manifest


def train_denoiser(
    config: DenoiseConfig,
    out_dir: str | Path,
    images: Optional[Sequence[torch.Tensor]] = None,
) -> Path:
    """Train a denoiser; writes ``denoiser.miqm`` and ``denoise_log.csv`` into ``out_dir``.

    ``images`` overrides ``config.train_root`` (useful for in-memory tests).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    E = None
    if config.loss == "e-mae":
        E = load_frozen_emae(config.emae_checkpoint)
        E.requires_grad_(False)
        frozen_before = parameter_digest(E)
    if images is None:
        if config.train_root is None:
            raise DenoiseError("no training images: set train_root")
        images = [load_image(p) for p in list_images(config.train_root)]

    torch.manual_seed(config.seed)
    model = init_denoiser(DnCNN(3, config.depth, config.width), config.seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    noise_gen = torch.Generator().manual_seed(config.seed)
    rows = []
    step = 0
    per_epoch = math.ceil(config.patches_per_epoch / config.batch_size)
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, 3, epoch])
        patches = sample_patches(images, per_epoch * config.batch_size, config.patch_size, rng)
        sigmas = sample_sigmas(len(patches), config.sigma_range, rng)
        for b in range(per_epoch):
            if config.max_steps is not None and step >= config.max_steps:
                break
            sl = slice(b * config.batch_size, (b + 1) * config.batch_size)
            clean = patches[sl]
            noisy = add_noise(clean, sigmas[sl], noise_gen)
            loss = denoise_loss(config.loss, clean, model(noisy), E)
            if not torch.isfinite(loss):
                raise DenoiseError(f"non-finite loss at step {step + 1}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            rows.append({"step": step, "epoch": epoch, "loss": f"{float(loss.detach()):.9g}"})
        if config.max_steps is not None and step >= config.max_steps:
            break

    if E is not None and parameter_digest(E) != frozen_before:
        raise DenoiseError("E-MAE mask/scaler weights changed during denoiser training")
    with open(out / "denoise_log.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=("step", "epoch", "loss"))
        w.writeheader()
        w.writerows(rows)
    extra = {"steps": step}
    if E is not None:
        extra["emae_digest"] = frozen_before
    return save_denoiser(out / "denoiser.miqm", model, config, extra)


@torch.no_grad()
def denoise(model: DnCNN, noisy: torch.Tensor) -> torch.Tensor:
    model.eval()
    x = noisy if noisy.dim() == 4 else noisy.unsqueeze(0)
    out = model(x).clamp(0.0, 1.0)
    return out if noisy.dim() == 4 else out.squeeze(0)


@torch.no_grad()
def evaluate_denoisers(
    ckpts: Mapping[str, str | Path],
    test_images: Sequence[torch.Tensor],
    sigmas: Sequence[float] = EVAL_SIGMAS,
    emae_checkpoint: Optional[str | Path] = None,
    weights: Optional[BackboneWeights] = None,
    seed: int = 0,
) -> list[dict]:
    """One row per (checkpoint, sigma): mean PSNR, SSIM, LPIPS and E-MAE over the test images.

    ``ckpts`` maps a label (``"mae"``, ``"e-mae"`` or ``"mae/seed1"`` ...) to a
    denoiser checkpoint. The noisy inputs are identical across checkpoints.
    LPIPS needs backbone weights and E-MAE needs a checkpoint; missing
    columns are left empty.
    """
    E = load_frozen_emae(emae_checkpoint) if emae_checkpoint is not None else None
    lp = get_metric("lpips", weights) if weights is not None else None
    noisy_sets = {}
    for s in sigmas:
        g = torch.Generator().manual_seed(int(seed) * 1000 + int(round(s)))
        noisy_sets[s] = [add_noise(im.unsqueeze(0), [s], g) for im in test_images]
    rows = []
    for label, path in ckpts.items():
        model, manifest = load_denoiser(path)
        loss_id = manifest["config"]["loss"]
        for s in sigmas:
            acc = {k: [] for k in ("psnr", "ssim", "lpips", "e_mae")}
            for clean, noisy in zip(test_images, noisy_sets[s]):
                clean = clean.unsqueeze(0)
                out = denoise(model, noisy)
                acc["psnr"].append(psnr(clean, out).item())
                acc["ssim"].append(ssim(clean, out).item())
                if lp is not None:
                    acc["lpips"].append(lp(clean, out).item())
                if E is not None:
                    acc["e_mae"].append(enhanced_score(E, clean, out).item())
            row = {"label": label, "loss": loss_id, "seed": manifest["config"]["seed"], "sigma": s}
            for k, v in acc.items():
                row[k] = float(np.mean(v)) if v else None
            rows.append(row)
    return rows


def write_denoise_report(rows: Sequence[dict], out_dir: str | Path, meta: Optional[dict] = None) -> dict:
    """``denoise_report.csv`` (+ JSON and a PSNR/E-MAE figure)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ("label",) + REPORT_COLUMNS
    with open(out / "denoise_report.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (f"{r[c]:.6f}" if isinstance(r[c], float) else r[c]) for c in cols])
    (out / "denoise_report.json").write_text(
        json.dumps({"rows": list(rows), "meta": meta or {}}, indent=2, sort_keys=True), encoding="utf-8")
    plot_denoise(rows, out / "denoise_report.png")
    return {"csv": out / "denoise_report.csv", "json": out / "denoise_report.json", "png": out / "denoise_report.png"}


def directional_check(rows: Sequence[dict], sigma: float = 50) -> dict[int, dict]:
    """Per seed: does MAE win PSNR and E-MAE win the E-MAE score at ``sigma``?"""
    by = {}
    for r in rows:
        if float(r["sigma"]) == float(sigma):
            by.setdefault(int(r["seed"]), {})[r["loss"]] = r
    out = {}
    for seed, d in sorted(by.items()):
        if set(d) >= set(LOSSES) and d["mae"]["e_mae"] is not None:
            out[seed] = {
                "psnr_mae_wins": d["mae"]["psnr"] >= d["e-mae"]["psnr"],
                "emae_wins": d["e-mae"]["e_mae"] <= d["mae"]["e_mae"],
            }
    return out


def run_denoise_demo(
    base: DenoiseConfig,
    test_root: str | Path,
    out_dir: str | Path,
    seeds: Sequence[int] = (0, 1, 2),
    sigmas: Sequence[float] = EVAL_SIGMAS,
    weights: Optional[BackboneWeights] = None,
    train_images: Optional[Sequence[torch.Tensor]] = None,
    test_images: Optional[Sequence[torch.Tensor]] = None,
) -> dict:
    """Train both losses for every seed, evaluate, and write the report."""
    out = Path(out_dir)
    ckpts = {}
    for seed in seeds:
        for loss in LOSSES:
            cfg = DenoiseConfig(**{**base.to_dict(), "loss": loss, "seed": seed,
                                   "sigma_range": tuple(base.sigma_range)})
            label = f"{loss}/seed{seed}"
            log.info("training denoiser %s", label)
            ckpts[label] = train_denoiser(cfg, out / loss / f"seed{seed}", images=train_images)
    if test_images is None:
        test_images = [load_image(p) for p in list_images(test_root)]
    rows = evaluate_denoisers(ckpts, test_images, sigmas, base.emae_checkpoint, weights)
    checks = directional_check(rows)
    paths = write_denoise_report(rows, out, meta={"config": base.to_dict(), "seeds": list(seeds),
                                                  "directions": {str(k): v for k, v in checks.items()}})
    return {"rows": rows, "directions": checks, **paths}
