"""Frozen backbone weights and the JSON weights manifest.

Manifest layout (paths relative to the manifest file)::

    {
      "backbone": {"path": "vgg16-397923af.pth", "bytes": 553433881, "sha256": "..."},
      "lpips":    {"path": "lpips_vgg_v0.1.pth", "bytes": 7289, "sha256": "..."},
      "dists":    {"path": "dists_weights.pt", "bytes": 12288, "sha256": "..."}
    }

The backbone blob is a torchvision-style VGG16 state dict (``features.N.*``
keys). ``lpips`` holds the LPIPS linear heads (``linK.model.1.weight``) and
``dists`` the DISTS ``alpha``/``beta`` tensors. Neither is bundled.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

# Indices of conv layers in torchvision's vgg16().features, in order.
VGG16_CONVS = (0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28)
VGG16_CHANNELS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
LAYER_NAMES = ("relu1_2", "relu2_2", "relu3_3", "relu4_3", "relu5_3")
LAYER_CHANNELS = (64, 128, 256, 512, 512)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
# LPIPS' own input scaling, applied to images mapped to [-1, 1].
LPIPS_SHIFT = (-0.030, -0.088, -0.188)
LPIPS_SCALE = (0.458, 0.448, 0.450)


class WeightsError(Exception):
    """Weight blob missing, truncated, or failing its content hash."""


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def describe_blob(path: str | Path, relative_to: Optional[Path] = None) -> dict:
    path = Path(path)
    entry_path = path
    if relative_to is not None:
        try:
            entry_path = path.resolve().relative_to(relative_to.resolve())
        except ValueError:
            entry_path = path.resolve()
    return {"path": str(entry_path), "bytes": path.stat().st_size, "sha256": sha256_file(path)}


def write_manifest(path: str | Path, backbone=None, lpips=None, dists=None) -> Path:
    """Write a manifest describing the given blob files (any may be omitted)."""
    path = Path(path)
    base = path.parent
    manifest = {}
    for key, blob in (("backbone", backbone), ("lpips", lpips), ("dists", dists)):
        if blob is not None:
            manifest[key] = describe_blob(blob, base)
    manifest["normalization"] = {"imagenet_mean": IMAGENET_MEAN, "imagenet_std": IMAGENET_STD,
                                 "lpips_shift": LPIPS_SHIFT, "lpips_scale": LPIPS_SCALE}
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def _verified(entry: dict, base: Path) -> Path:
    path = Path(entry["path"])
    path = path if path.is_absolute() else base / path
    if not path.exists():
        raise WeightsError(f"weight file missing: {path}")
    size = path.stat().st_size
    if "bytes" in entry and size != int(entry["bytes"]):
        raise WeightsError(f"{path}: expected {entry['bytes']} bytes, found {size}")
    if "sha256" in entry and sha256_file(path) != entry["sha256"]:
        raise WeightsError(f"{path}: content hash mismatch")
    return path


def _torch_load(path: Path) -> dict:
    try:
        return torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt pickle / zip
        raise WeightsError(f"cannot read weight file {path}: {exc}") from exc


@dataclass
class BackboneWeights:
    """VGG16 trunk tensors plus optional LPIPS and DISTS heads. Never trained."""

    vgg: dict[str, torch.Tensor]
    lpips_lin: Optional[list[torch.Tensor]] = None
    dists_alpha: Optional[torch.Tensor] = None
    dists_beta: Optional[torch.Tensor] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [f"features.{i}.{p}" for i in VGG16_CONVS for p in ("weight", "bias")
                   if f"features.{i}.{p}" not in self.vgg]
        if missing:
            raise WeightsError(f"backbone state dict lacks {len(missing)} tensors, e.g. {missing[0]}")
        for t in self.tensors():
            t.requires_grad_(False)

    def tensors(self) -> list[torch.Tensor]:
        out = list(self.vgg.values())
        out += list(self.lpips_lin or [])
        out += [t for t in (self.dists_alpha, self.dists_beta) if t is not None]
        return out

    @property
    def is_random(self) -> bool:
        return self.provenance.get("backbone") == "random"

    @classmethod
    def from_manifest(cls, manifest: str | Path) -> "BackboneWeights":
        manifest = Path(manifest)
        if not manifest.exists():
            raise WeightsError(f"weights manifest not found: {manifest}")
        spec = json.loads(manifest.read_text(encoding="utf-8"))
        base = manifest.parent
        if "backbone" not in spec:
            raise WeightsError(f"{manifest}: no 'backbone' entry")
        vgg_path = _verified(spec["backbone"], base)
        state = _torch_load(vgg_path)
        vgg = {k: v.float() for k, v in state.items() if k.startswith("features.")}
        provenance = {"backbone": str(vgg_path)}
        lpips_lin = None
        if "lpips" in spec:
            lp_path = _verified(spec["lpips"], base)
            lp = _torch_load(lp_path)
            lpips_lin = [lp[f"lin{k}.model.1.weight"].float().reshape(-1) for k in range(len(LAYER_NAMES))]
            provenance["lpips"] = str(lp_path)
        alpha = beta = None
        if "dists" in spec:
            d_path = _verified(spec["dists"], base)
            d = _torch_load(d_path)
            alpha, beta = d["alpha"].float().reshape(-1), d["beta"].float().reshape(-1)
            provenance["dists"] = str(d_path)
        return cls(vgg=vgg, lpips_lin=lpips_lin, dists_alpha=alpha, dists_beta=beta, provenance=provenance)

    @classmethod
    def random(cls, seed: int = 0, heads: bool = True) -> "BackboneWeights":
        """Deterministic He-initialised trunk for tests and plumbing runs.

        Scores computed with it are not perceptual quality predictions.
        """
        g = torch.Generator().manual_seed(seed)
        vgg = {}
        cin = 3
        for idx, cout in zip(VGG16_CONVS, VGG16_CHANNELS):
            std = (2.0 / (cin * 9)) ** 0.5
            vgg[f"features.{idx}.weight"] = torch.randn(cout, cin, 3, 3, generator=g) * std
            vgg[f"features.{idx}.bias"] = torch.randn(cout, generator=g) * 0.01
            cin = cout
        lin = alpha = beta = None
        if heads:
            lin = [torch.rand(c, generator=g) * 0.1 for c in LAYER_CHANNELS]
            total = 3 + sum(LAYER_CHANNELS)
            alpha = torch.rand(total, generator=g) * 0.02 + 0.01
            beta = torch.rand(total, generator=g) * 0.02 + 0.01
        return cls(vgg=vgg, lpips_lin=lin, dists_alpha=alpha, dists_beta=beta,
                   provenance={"backbone": "random", "seed": seed})

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.vgg):
            h.update(name.encode())
            h.update(self.vgg[name].detach().contiguous().numpy().tobytes())
        for t in (self.lpips_lin or []) + [x for x in (self.dists_alpha, self.dists_beta) if x is not None]:
            h.update(t.detach().contiguous().numpy().tobytes())
        return h.hexdigest()
