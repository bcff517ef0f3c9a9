from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

import synth  # noqa: E402

from miqm.metrics.weights import BackboneWeights, write_manifest  # noqa: E402

LPIPS_HEADS = Path("/usr/local/lib/python3.10/dist-packages/lpips/weights/v0.1/vgg.pth")
DISTS_HEADS = Path("/usr/local/weights.pt")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pair(rng: np.random.Generator, shape=(1, 3, 32, 32), noise=0.08, dtype=torch.float32):
    R = torch.from_numpy(rng.random(shape)).to(dtype)
    D = (R + noise * torch.from_numpy(rng.normal(size=shape)).to(dtype)).clamp(0.0, 1.0)
    return R, D


@pytest.fixture(scope="session")
def random_weights() -> BackboneWeights:
    """Seeded random VGG16 trunk with random LPIPS/DISTS heads (plumbing only, not perceptual)."""
    return BackboneWeights.random(seed=0)


@pytest.fixture(scope="session")
def weights_manifest(tmp_path_factory, random_weights) -> Path:
    """A manifest pointing at the random trunk plus the reference packages' published heads."""
    d = tmp_path_factory.mktemp("weights")
    torch.save(random_weights.vgg, d / "vgg16_random.pth")
    lpips_blob = dists_blob = None
    if LPIPS_HEADS.exists():
        lpips_blob = d / "lpips_vgg.pth"
        torch.save(torch.load(LPIPS_HEADS, map_location="cpu"), lpips_blob)
    if DISTS_HEADS.exists():
        dists_blob = d / "dists.pt"
        torch.save(torch.load(DISTS_HEADS, map_location="cpu"), dists_blob)
    return write_manifest(d / "manifest.json", backbone=d / "vgg16_random.pth", lpips=lpips_blob, dists=dists_blob)


@pytest.fixture(scope="session")
def kadid_like(tmp_path_factory) -> Path:
    return synth.make_kadid_like(tmp_path_factory.mktemp("kadid"), n_refs=6)


@pytest.fixture(scope="session")
def tid_like(tmp_path_factory) -> Path:
    return synth.make_tid_like(tmp_path_factory.mktemp("tid"), n_refs=4)


@pytest.fixture(scope="session")
def image_folder(tmp_path_factory) -> Path:
    return synth.make_image_folder(tmp_path_factory.mktemp("imgs"), n=3, size=48)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    number = int(name.split("_")[2])
    label = " ".join(name.split("_")[3:])
    if report.failed:
        crash = getattr(report.longrepr, "reprcrash", None)
        reason = crash.message.splitlines()[0] if crash is not None else str(report.longrepr).splitlines()[-1]
        _CRITERIA[number] = ("FAIL", f"{label}: {reason}")
    elif report.when == "call" and number not in _CRITERIA:
        _CRITERIA[number] = ("PASS", label)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, text = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {text}")
