import math

import numpy as np
import pytest

from conftest import naive_ssim3d
from ulfenc.metrics import (
    SSIM_C1,
    MetricReport,
    build_report,
    challenge_score,
    mae,
    nmse,
    psnr,
    ssim3d,
    volume_metrics,
)


# --------------------------------------------------------------------- ssim


def test_ssim_self_is_exactly_one():
    rng = np.random.default_rng(0)
    x = rng.random((12, 12, 12))
    assert ssim3d(x, x) == 1.0


def test_ssim_constant_fields_closed_form():
    x = np.zeros((12, 12, 12))
    y = np.ones((12, 12, 12))
    expected = SSIM_C1 / (1.0 + SSIM_C1)
    assert ssim3d(x, y) == pytest.approx(expected, rel=1e-9)
    assert expected == pytest.approx(9.999e-5, abs=1e-8)


def test_ssim_matches_bruteforce_oracle():
    rng = np.random.default_rng(42)
    for _ in range(10):
        shape = tuple(rng.integers(12, 15, size=3))
        x, y = rng.random(shape), rng.random(shape)
        assert ssim3d(x, y) == pytest.approx(naive_ssim3d(x, y), abs=1e-6)


def test_ssim_masked_matches_bruteforce_oracle():
    rng = np.random.default_rng(43)
    shape = (13, 13, 13)
    x, y = rng.random(shape), rng.random(shape)
    mask = (rng.random(shape) > 0.4).astype(np.float32)
    assert ssim3d(x, y, mask=mask) == pytest.approx(naive_ssim3d(x, y, mask=mask), abs=1e-6)


def test_ssim_symmetry():
    rng = np.random.default_rng(3)
    x, y = rng.random((12, 12, 12)), rng.random((12, 12, 12))
    assert ssim3d(x, y) == pytest.approx(ssim3d(y, x), abs=1e-7)


def test_ssim_all_ones_mask_equals_unmasked():
    rng = np.random.default_rng(4)
    x, y = rng.random((12, 12, 12)), rng.random((12, 12, 12))
    assert ssim3d(x, y, mask=np.ones_like(x)) == ssim3d(x, y)


def test_ssim_rejects_small_volumes():
    x = np.zeros((10, 12, 12))
    with pytest.raises(ValueError, match="window"):
        ssim3d(x, x)


def test_ssim_rejects_empty_mask_interior():
    x = np.zeros((12, 12, 12))
    mask = np.zeros_like(x)
    mask[0, 0, 0] = 1  # outside the valid interior
    with pytest.raises(ValueError):
        ssim3d(x, x, mask=mask)


# --------------------------------------------------------------------- psnr


def test_psnr_infinite_for_identical():
    x = np.random.default_rng(1).random((4, 4, 4))
    assert psnr(x, x) == math.inf


def test_psnr_known_values():
    x = np.zeros((5, 5, 4))
    y = np.full_like(x, 0.1)  # MSE = 0.01
    assert psnr(x, y) == pytest.approx(20.0, abs=1e-9)
    y2 = np.ones_like(x)  # MSE = 1
    assert psnr(x, y2) == pytest.approx(0.0, abs=1e-9)


def test_psnr_masked():
    x = np.zeros((4, 4, 4))
    y = np.zeros_like(x)
    y[0] = 1.0
    mask = np.zeros_like(x)
    mask[1:] = 1.0
    assert psnr(x, y, mask=mask) == math.inf
    assert psnr(x, y) < math.inf


# ---------------------------------------------------------------- mae, nmse


def test_mae_nmse_trivial_values():
    x = np.zeros((4, 4, 4))
    y = np.full_like(x, 0.5)
    assert mae(x, y) == pytest.approx(0.5)
    assert nmse(x, y) == pytest.approx(1.0)
    assert mae(y, y) == 0.0
    assert nmse(y, y) == 0.0


def test_mae_nmse_match_scalar_loop_oracle():
    rng = np.random.default_rng(7)
    x, y = rng.random((8, 8, 8)), rng.random((8, 8, 8))
    acc_abs = 0.0
    acc_sq = 0.0
    acc_ref = 0.0
    for i in range(8):
        for j in range(8):
            for k in range(8):
                acc_abs += abs(x[i, j, k] - y[i, j, k])
                acc_sq += (x[i, j, k] - y[i, j, k]) ** 2
                acc_ref += y[i, j, k] ** 2
    assert mae(x, y) == pytest.approx(acc_abs / 512, abs=1e-7)
    assert nmse(x, y) == pytest.approx(acc_sq / acc_ref, abs=1e-7)


def test_nmse_zero_energy_reference():
    x = np.ones((4, 4, 4))
    with pytest.raises(ValueError, match="zero energy"):
        nmse(x, np.zeros_like(x))


def test_masked_voxel_metrics_all_ones_mask():
    rng = np.random.default_rng(8)
    x, y = rng.random((6, 6, 6)), rng.random((6, 6, 6))
    ones = np.ones_like(x)
    assert mae(x, y, mask=ones) == mae(x, y)
    assert nmse(x, y, mask=ones) == nmse(x, y)
    assert psnr(x, y, mask=ones) == psnr(x, y)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        mae(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


# -------------------------------------------------------------------- score


def test_challenge_score_reference_point():
    assert challenge_score(0.714, 29.84, 0.070, 0.066) == pytest.approx(0.779, abs=1e-3)


def test_challenge_score_perfect():
    assert challenge_score(1.0, 32.0, 0.0, 0.0) == pytest.approx(1.0, abs=1e-12)
    assert challenge_score(1.0, math.inf, 0.0, 0.0) == pytest.approx(1.0, abs=1e-12)


def test_challenge_score_second_reference_point():
    # direct arithmetic: 0.7*0.715 + 0.1*30.01/32 + 0.1*0.931 + 0.1*0.847
    assert challenge_score(0.715, 30.01, 0.069, 0.153) == pytest.approx(0.7721, abs=5e-4)


def test_challenge_score_monotonicity():
    rng = np.random.default_rng(9)
    for _ in range(200):
        s, p, m, n = rng.random(), rng.uniform(0, 31), rng.random(), rng.random()
        base = challenge_score(s, p, m, n)
        assert challenge_score(s + 0.01, p, m, n) > base
        assert challenge_score(s, p + 0.5, m, n) > base
        assert challenge_score(s, p, m + 0.01, n) < base
        assert challenge_score(s, p, m, n + 0.01) < base


def test_challenge_score_psnr_cap():
    assert challenge_score(0.5, 40.0, 0.1, 0.1) == challenge_score(0.5, 32.0, 0.1, 0.1)


# ------------------------------------------------------------------- report


def test_report_aggregates_are_entry_means():
    rng = np.random.default_rng(10)
    entries = []
    for sid in ("s0", "s1"):
        for contrast in ("T1w", "T2w"):
            x, y = rng.random((12, 12, 12)), rng.random((12, 12, 12))
            mask = np.zeros((12, 12, 12))
            mask[3:9, 3:9, 3:9] = 1.0
            entries.append(volume_metrics(x, y, mask=mask, subject_id=sid, contrast=contrast))
    report = build_report(entries)
    assert report.aggregate_full.ssim == pytest.approx(np.mean([e.full.ssim for e in entries]))
    assert report.aggregate_masked.mae == pytest.approx(np.mean([e.masked.mae for e in entries]))
    assert report.score == pytest.approx(
        challenge_score(
            report.aggregate_masked.ssim,
            report.aggregate_masked.psnr,
            report.aggregate_masked.mae,
            report.aggregate_masked.nmse,
        )
    )


def test_report_json_round_trip():
    rng = np.random.default_rng(11)
    x, y = rng.random((12, 12, 12)), rng.random((12, 12, 12))
    report = build_report([volume_metrics(x, y, subject_id="s", contrast="T1w")])
    doc = report.to_json_dict()
    back = MetricReport.from_json_dict(doc)
    assert back.score == report.score
    assert back.entries[0].full.ssim == report.entries[0].full.ssim


def test_volume_metrics_without_mask_copies_full():
    rng = np.random.default_rng(12)
    x, y = rng.random((12, 12, 12)), rng.random((12, 12, 12))
    vm = volume_metrics(x, y)
    assert vm.masked.ssim == vm.full.ssim
    assert vm.masked.psnr == vm.full.psnr
