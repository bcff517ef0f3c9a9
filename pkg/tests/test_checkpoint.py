"""Tensor container format and enhanced-metric checkpoints."""

import json

import pytest
import torch

from miqm.checkpoint import (
    ALIGN,
    MAGIC,
    CheckpointError,
    file_digest,
    load_enhanced,
    read_manifest,
    read_tensors,
    save_enhanced,
    write_tensors,
)
from miqm.masking import EnhancedMetric


def _tensors():
    g = torch.Generator().manual_seed(0)
    return {
        "a": torch.randn(3, 5, generator=g),
        "b": torch.randn(7, generator=g, dtype=torch.float64),
        "c": torch.arange(11, dtype=torch.int64),
        "d": torch.tensor([1, 2, 255], dtype=torch.uint8),
    }


def test_roundtrip_preserves_values_and_dtypes(tmp_path):
    t = _tensors()
    p = write_tensors(tmp_path / "x.miqm", t, {"note": "hi"})
    manifest, back = read_tensors(p)
    assert manifest["note"] == "hi" and manifest["format"] == MAGIC.decode()
    for k in t:
        assert back[k].dtype == t[k].dtype
        assert torch.equal(back[k], t[k])


def test_layout_is_aligned_and_self_describing(tmp_path):
    p = write_tensors(tmp_path / "x.miqm", _tensors())
    raw = p.read_bytes()
    assert raw[:8] == MAGIC
    manifest = json.loads(raw[8:raw.index(b"\0", 8)])
    for name, e in manifest["tensors"].items():
        assert e["offset"] % ALIGN == 0
        assert e["offset"] + e["nbytes"] <= len(raw)
    # tensors are stored in insertion order, back to back on 64-byte boundaries
    offs = [manifest["tensors"][k]["offset"] for k in ("a", "b", "c", "d")]
    assert offs == sorted(offs)


def test_files_are_byte_identical(tmp_path):
    a = write_tensors(tmp_path / "a.miqm", _tensors(), {"k": 1})
    b = write_tensors(tmp_path / "b.miqm", _tensors(), {"k": 1})
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("damage", ["magic", "truncate", "manifest", "missing"])
def test_corruption_is_reported(tmp_path, damage):
    p = write_tensors(tmp_path / "x.miqm", _tensors())
    raw = bytearray(p.read_bytes())
    if damage == "magic":
        raw[:8] = b"NOTMIQM!"
    elif damage == "truncate":
        raw = raw[:-ALIGN * 2]
    elif damage == "manifest":
        raw[9] = ord("}")
    if damage == "missing":
        p.unlink()
    else:
        p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        read_tensors(p)


def test_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointError):
        write_tensors(tmp_path / "x.miqm", {"h": torch.zeros(2, dtype=torch.float16)})


def test_enhanced_roundtrip_and_metadata(tmp_path, random_weights):
    E = EnhancedMetric("dists", random_weights, seed=9)
    p = save_enhanced(tmp_path / "e.miqm", E, {"lr": 1e-4})
    m = read_manifest(p)
    assert m["kind"] == "enhanced-metric" and m["metric"] == "dists" and m["init_seed"] == 9
    assert m["layers"] == list(E.layer_names)
    entry = m["tensors"]["generators.relu3_3.head.weight"]
    assert entry["layer"] == "relu3_3" and entry["metric"] == "dists"
    assert entry["config_digest"] == m["config_digest"]
    assert m["tensors"]["scaler.net.0.weight"]["layer"] == "scaler"
    F = load_enhanced(p, random_weights)
    for (n, a), b in zip(E.state_dict().items(), F.state_dict().values()):
        assert torch.equal(a, b), n
    assert not any(q.requires_grad for q in F.parameters())


def test_save_is_deterministic(tmp_path):
    a = save_enhanced(tmp_path / "a.miqm", EnhancedMetric("mae", seed=2), {"x": 1})
    b = save_enhanced(tmp_path / "b.miqm", EnhancedMetric("mae", seed=2), {"x": 1})
    assert file_digest(a) == file_digest(b)
    c = save_enhanced(tmp_path / "c.miqm", EnhancedMetric("mae", seed=3), {"x": 1})
    assert file_digest(a) != file_digest(c)


def test_load_rejects_other_kinds(tmp_path):
    p = write_tensors(tmp_path / "x.miqm", {"w": torch.zeros(1)}, {"kind": "denoiser"})
    with pytest.raises(CheckpointError, match="not an enhanced-metric"):
        load_enhanced(p)


def test_load_rejects_missing_tensors(tmp_path):
    E = EnhancedMetric("mae", seed=0)
    sd = {k: v for k, v in E.state_dict().items() if "head" not in k}
    header = {"kind": "enhanced-metric", "metric": "mae", "layers": ["image"], "init_seed": 0}
    p = write_tensors(tmp_path / "x.miqm", sd, header)
    with pytest.raises(CheckpointError, match="missing"):
        load_enhanced(p)
