"""Single-file tensor container.

Layout::

    b"MIQM0001"                 8-byte magic
    <UTF-8 JSON manifest>       sorted keys, no whitespace
    b"\\0" * k                   padding up to the first tensor (64-byte aligned)
    <tensor bytes> ...          little-endian, each starting at a multiple of 64

Every manifest tensor entry records ``dtype``, ``shape``, absolute byte
``offset`` and ``nbytes``; model checkpoints add ``metric``, ``layer``,
``init_seed`` and ``config_digest``. The JSON never contains a NUL byte, so
readers locate its end at the first NUL. Files are byte-for-byte
deterministic: no timestamps, sorted keys, fixed padding.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

MAGIC = b"MIQM0001"
ALIGN = 64

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "uint8": (torch.uint8, "|u1"),
}
_TORCH_TO_NAME = {v[0]: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    """Malformed, truncated or incompatible checkpoint file."""


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _layout(header: dict, entries: dict[str, dict]) -> tuple[bytes, int]:
    """Fix-point on the manifest length so that absolute offsets are self-consistent."""
    start = _align(len(MAGIC) + 2)
    while True:
        offset = start
        for entry in entries.values():
            entry["offset"] = offset
            offset = _align(offset + entry["nbytes"])
        manifest = dict(header, tensors=entries)
        blob = json.dumps(manifest, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        need = _align(len(MAGIC) + len(blob) + 1)
        if need <= start:
            return blob, start
        start = need


def write_tensors(
    path: str | Path,
    tensors: dict[str, torch.Tensor],
    header: Optional[dict] = None,
    tensor_meta: Optional[dict[str, dict]] = None,
) -> Path:
    """Write named tensors plus a JSON header atomically (temp file + rename)."""
    path = Path(path)
    header = dict(header or {})
    header.setdefault("format", MAGIC.decode())
    entries: dict[str, dict] = {}
    arrays: dict[str, bytes] = {}
    for name in tensors:
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _TORCH_TO_NAME:
            raise CheckpointError(f"unsupported dtype {t.dtype} for tensor {name!r}")
        dname = _TORCH_TO_NAME[t.dtype]
        data = t.numpy().astype(_DTYPES[dname][1], copy=False).tobytes()
        entries[name] = {"dtype": dname, "shape": list(t.shape), "nbytes": len(data)}
        entries[name].update((tensor_meta or {}).get(name, {}))
        arrays[name] = data
    blob, start = _layout(header, entries)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(blob)
        f.write(b"\0" * (start - len(MAGIC) - len(blob)))
        for name, entry in entries.items():
            assert f.tell() == entry["offset"]
            f.write(arrays[name])
            f.write(b"\0" * (_align(f.tell()) - f.tell()))
    os.replace(tmp, path)
    return path


def read_manifest(path: str | Path) -> dict:
    return read_tensors(path, load=False)[0]


def read_tensors(path: str | Path, load: bool = True) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    end = raw.find(b"\0", len(MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: manifest not terminated")
    try:
        manifest = json.loads(raw[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
    tensors: dict[str, torch.Tensor] = {}
    if load:
        for name, e in manifest.get("tensors", {}).items():
            off, n = int(e["offset"]), int(e["nbytes"])
            if off % ALIGN or off + n > len(raw):
                raise CheckpointError(f"{path}: tensor {name!r} out of bounds or misaligned")
            arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]][1], count=n // np.dtype(_DTYPES[e["dtype"]][1]).itemsize,
                                offset=off)
            tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True)).reshape(e["shape"])
    return manifest, tensors


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- model files


def save_enhanced(path: str | Path, E, config: Optional[dict] = None, extra: Optional[dict[str, Any]] = None) -> Path:
    """Write an :class:`EnhancedMetric`'s generator and scaler weights."""
    from .masking import INIT_SCHEME

    config = dict(config or {})
    digest = config_digest(config)
    tensors, meta = {}, {}
    for name, t in E.state_dict().items():
        layer = name.split(".")[1] if name.startswith("generators.") else "scaler"
        tensors[name] = t.float()
        meta[name] = {"metric": E.metric_id, "layer": layer, "init_seed": E.init_seed, "config_digest": digest}
    header = {
        "kind": "enhanced-metric",
        "metric": E.metric_id,
        "layers": list(E.layer_names),
        "init_seed": E.init_seed,
        "init_scheme": INIT_SCHEME,
        "config": config,
        "config_digest": digest,
    }
    if extra:
        header["extra"] = extra
    return write_tensors(path, tensors, header, meta)


def load_enhanced(path: str | Path, weights=None, allow_equal_weights: bool = False):
    """Rebuild an :class:`EnhancedMetric` from :func:`save_enhanced` output."""
    from .masking import EnhancedMetric

    manifest, tensors = read_tensors(path)
    if manifest.get("kind") != "enhanced-metric":
        raise CheckpointError(f"{path}: not an enhanced-metric checkpoint (kind={manifest.get('kind')!r})")
    E = EnhancedMetric(manifest["metric"], weights, seed=manifest.get("init_seed", 0),
                       allow_equal_weights=allow_equal_weights)
    if list(E.layer_names) != list(manifest["layers"]):
        raise CheckpointError(f"{path}: layer names {manifest['layers']} do not match {list(E.layer_names)}")
    missing = set(E.state_dict()) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:3]}")
    E.load_state_dict(tensors)
    E.requires_grad_(False)
    E.eval()
    return E
