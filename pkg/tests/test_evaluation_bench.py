"""Benchmark driver, report files and metric resolution."""

import csv
import json
import math

import numpy as np
import pytest
import torch

from miqm.checkpoint import save_enhanced
from miqm.data import load_dataset
from miqm.evaluation import REPORT_COLUMNS, benchmark, read_reports, resolve_metric, score_split, srcc, write_reports
from miqm.masking import EnhancedMetric, force_mask_output
from miqm.metrics import HIGHER_BETTER, LOWER_BETTER


@pytest.fixture(scope="module")
def tid(tid_like):
    return load_dataset(tid_like, "tid2013")


def test_benchmark_row_counts_and_subsets(tid):
    specs = [resolve_metric(m) for m in ("mae", "psnr", "ssim")]
    reports = benchmark(specs, [tid], short_side=None, subsets={"noise": ["noise"], "blur": ["blur"]})
    # [DERIVED] 3 metrics x (full split + 2 subsets)
    assert len(reports) == 9
    by = {(r.dataset, r.metric): r for r in reports}
    assert by[("tid2013", "mae")].n == 40
    assert by[("tid2013:noise", "mae")].n == 20 and by[("tid2013:blur", "psnr")].n == 20
    for r in reports:
        assert -1 <= r.srcc <= 1
    assert by[("tid2013", "mae")].srcc > 0.5


def test_scores_are_oriented_like_the_metric(tid):
    scores = score_split([resolve_metric("mae"), resolve_metric("psnr")], tid, short_side=None)
    mos = np.array([r.mos for r in tid])
    assert srcc(-scores["mae"], mos) > 0 and srcc(scores["psnr"], mos) > 0


def test_reports_roundtrip(tid, tmp_path):
    reports = benchmark([resolve_metric("mae")], [tid], short_side=None)
    files = write_reports(reports, tmp_path / "out" / "report.csv", meta={"note": "x"})
    assert all(p.exists() for p in files.values())
    with open(files["csv"], newline="") as f:
        reader = csv.DictReader(f)
        assert tuple(reader.fieldnames) == REPORT_COLUMNS
        assert len(list(reader)) == 1
    payload = json.loads(files["json"].read_text())
    assert payload["meta"] == {"note": "x"} and len(payload["reports"]) == 1
    back = read_reports(files["csv"])[0]
    r = reports[0]
    assert (back.dataset, back.metric, back.n, back.flags) == (r.dataset, r.metric, r.n, r.flags)
    assert back.srcc == pytest.approx(r.srcc, abs=1e-9) and back.plcc == pytest.approx(r.plcc, abs=1e-9)
    assert files["png"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_resolve_base_and_enhanced(tmp_path, rng):
    spec = resolve_metric("SSIM")
    assert spec.name == "ssim" and spec.orientation == HIGHER_BETTER
    E = force_mask_output(EnhancedMetric("mae", seed=0))
    save_enhanced(tmp_path / "e-mae.miqm", E)
    (tmp_path / "psnr").mkdir()
    save_enhanced(tmp_path / "psnr" / "model.miqm", EnhancedMetric("psnr", seed=0))
    R = torch.from_numpy(rng.random((1, 3, 16, 16))).float()
    D = (R + 0.05).clamp(0, 1)
    e = resolve_metric("e-mae", checkpoints=tmp_path)
    assert e.name == "e-mae" and e.orientation == LOWER_BETTER
    assert e.scorer(R, D).item() == pytest.approx(resolve_metric("mae").scorer(R, D).item(), abs=1e-6)
    assert resolve_metric("e-psnr", checkpoints=tmp_path).name == "e-psnr"
    assert resolve_metric("e-mae", checkpoints=tmp_path / "e-mae.miqm").name == "e-mae"
    with pytest.raises(FileNotFoundError):
        resolve_metric("e-ssim", checkpoints=tmp_path)
    with pytest.raises(FileNotFoundError):
        resolve_metric("e-mae")
    with pytest.raises(KeyError):
        resolve_metric("bogus")


def test_constant_scores_are_flagged(tid):
    from miqm.evaluation import MetricSpec

    const = MetricSpec("const", lambda R, D: torch.zeros(R.shape[0]), LOWER_BETTER)
    rep = benchmark([const], [tid], short_side=None)[0]
    assert math.isnan(rep.srcc) and "degenerate" in rep.flags
