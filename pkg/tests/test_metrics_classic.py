"""MAE / PSNR / SSIM / MS-SSIM: identities, closed forms and loop oracles."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import random_pair
from miqm.metrics import HIGHER_BETTER, LOWER_BETTER, mae, ms_ssim, psnr, ssim
from miqm.metrics.classic import PSNR_CAP_DB, gaussian_window


def _img(rng, shape=(1, 3, 32, 32)):
    return torch.from_numpy(rng.random(shape))


@pytest.mark.parametrize("fn,expect", [(mae, 0.0), (psnr, PSNR_CAP_DB), (ssim, 1.0)])
def test_identity_cases_are_exact(rng, fn, expect):
    x = _img(rng)
    assert fn(x, x).item() == expect


def test_ms_ssim_identity_is_exact(rng):
    x = _img(rng, (1, 3, 176, 176))
    assert ms_ssim(x, x).item() == 1.0


def test_mae_and_psnr_closed_forms(rng):
    # [TRIVIAL] a uniform offset of 0.1 gives MAE 0.1 and MSE 0.01 -> 20 dB
    R = torch.full((1, 3, 16, 16), 0.4, dtype=torch.float64)
    D = R + 0.1
    assert mae(R, D).item() == pytest.approx(0.1, abs=1e-15)
    assert psnr(R, D).item() == pytest.approx(20.0, abs=1e-12)
    R, D = random_pair(rng, dtype=torch.float64)
    a, b = R.numpy(), D.numpy()
    assert mae(R, D).item() == pytest.approx(np.abs(a - b).mean(), abs=1e-15)
    assert psnr(R, D).item() == pytest.approx(-10 * math.log10(((a - b) ** 2).mean()), abs=1e-10)


def test_gaussian_window_normalised():
    w = gaussian_window(dtype=torch.float64)
    assert w.shape == (11, 11)
    assert w.sum().item() == pytest.approx(1.0, abs=1e-15)
    assert torch.equal(w, w.T)


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_sliding_window_oracle(seed):
    # [DERIVED] per-window weighted moments, no convolution
    rng = np.random.default_rng(seed)
    R, D = random_pair(rng, noise=0.05 + 0.05 * seed, dtype=torch.float64)
    want, want_map, _ = oracles.ssim_sliding_window(oracles.rec709_luma(R[0].numpy()),
                                                    oracles.rec709_luma(D[0].numpy()))
    res = ssim(R, D)
    assert res.item() == pytest.approx(want, abs=1e-6)
    # error map = 1 - SSIM, edge-replicated back to full size
    np.testing.assert_allclose(res.error_map[0, 0, 5:-5, 5:-5].numpy(), 1 - want_map, atol=1e-6)
    assert res.error_map.shape == (1, 1, 32, 32)


def test_ssim_float32_close_to_float64(rng):
    R, D = random_pair(rng, dtype=torch.float64)
    assert ssim(R.float(), D.float()).item() == pytest.approx(ssim(R, D).item(), abs=1e-5)


def test_ms_ssim_matches_oracle(rng):
    R, D = random_pair(rng, shape=(1, 3, 176, 176), noise=0.1, dtype=torch.float64)
    want = oracles.ms_ssim_oracle(R[0].numpy(), D[0].numpy())
    assert ms_ssim(R, D).item() == pytest.approx(want, abs=1e-6)


def test_orientation_and_batching(rng):
    R, D = random_pair(rng, shape=(3, 3, 32, 32))
    for fn, o in ((mae, LOWER_BETTER), (psnr, HIGHER_BETTER), (ssim, HIGHER_BETTER)):
        res = fn(R, D)
        assert res.orientation == o
        assert res.score.shape == (3,)
        for i in range(3):
            assert res.score[i].item() == pytest.approx(fn(R[i], D[i]).item(), abs=1e-6)


def test_size_and_shape_errors(rng):
    R, D = random_pair(rng)
    with pytest.raises(ValueError, match="shape mismatch"):
        mae(R, D[..., :16])
    with pytest.raises(ValueError, match="at least 11"):
        ssim(R[..., :8, :8], D[..., :8, :8])
    with pytest.raises(ValueError, match="at least 176"):
        ms_ssim(R, D)
    with pytest.raises(ValueError):
        mae(R[0, 0], D[0, 0])


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.3))
@settings(max_examples=30, deadline=None)
def test_symmetry_and_bounds(seed, noise):
    rng = np.random.default_rng(seed)
    R, D = random_pair(rng, shape=(1, 3, 16, 16), noise=noise, dtype=torch.float64)
    for fn in (mae, psnr, ssim):
        assert fn(R, D).item() == pytest.approx(fn(D, R).item(), abs=1e-12)
    assert mae(R, D).item() >= 0
    assert ssim(R, D).item() <= 1.0 + 1e-12
    assert psnr(R, D).item() <= PSNR_CAP_DB


@given(st.floats(0.01, 0.2), st.floats(1.1, 3.0))
@settings(max_examples=30, deadline=None)
def test_larger_error_never_scores_better(offset, factor):
    R = torch.full((1, 3, 16, 16), 0.3, dtype=torch.float64)
    small, big = R + offset, R + offset * factor
    assert mae(R, small).item() < mae(R, big).item()
    assert psnr(R, small).item() > psnr(R, big).item()
