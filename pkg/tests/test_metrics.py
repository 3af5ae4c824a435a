import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hclinpaint.metrics import MaskReport, format_report, mask_metrics, psnr, ssim


def test_two_by_two_counting():
    # 1 = intact; predicted corrupted {(0,0),(0,1)}, truly corrupted {(0,1),(1,1)}
    pred = np.array([[0.0, 0.0], [1.0, 1.0]])
    gt = np.array([[1.0, 0.0], [1.0, 0.0]])
    r = mask_metrics(pred, 1 - pred, gt)
    assert r.f1 == pytest.approx(0.5, abs=1e-12)
    assert r.iou == pytest.approx(1 / 3, abs=1e-12)
    assert r.accuracy == pytest.approx(0.5)


def test_perfect_and_complement():
    gt = np.zeros((4, 4))
    gt[:, :2] = 1
    r = mask_metrics(gt, 1 - gt, gt)
    assert (r.accuracy, r.f1, r.iou) == (1.0, 1.0, 1.0)
    assert r.bce <= 1e-6
    r = mask_metrics(1 - gt, gt, gt)
    assert r.iou == 0 and r.accuracy == 0


def test_shape_and_binary_checks():
    with pytest.raises(ValueError):
        mask_metrics(np.ones((2, 2)), np.ones((2, 2)), np.ones((3, 2)))
    with pytest.raises(ValueError):
        mask_metrics(np.ones((2, 2)), np.ones((2, 2)), np.full((2, 2), 0.5))


masks = arrays(np.float64, (6, 6), elements=st.sampled_from([0.0, 1.0]))


@given(masks, masks, arrays(np.float64, (6, 6), elements=st.floats(0, 1)))
def test_report_invariants(pred, gt, prob):
    r = mask_metrics(pred, prob, gt)
    assert 0 <= r.accuracy <= 1 and 0 <= r.f1 <= 1 and 0 <= r.iou <= 1
    assert r.bce >= 0
    assert r.f1 == pytest.approx(2 * r.iou / (1 + r.iou), abs=1e-12)


def test_psnr_cases():
    a = np.full((3, 8, 8), 0.5)
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a + 0.01) == pytest.approx(40.0, abs=1e-9)
    with pytest.raises(ValueError):
        psnr(a, a[:2])


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(0)
    base = rng.random((3, 16, 16))
    e = rng.uniform(-1, 1, size=base.shape)
    vals = [psnr(base, base + amp * e) for amp in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ssim_cases():
    rng = np.random.default_rng(2)
    a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, b) == pytest.approx(ssim(b, a))
    c1 = 1e-4
    expect = (2 * 0.35 + c1) / (0.25 + 0.49 + c1)
    assert ssim(np.full((8, 8), 0.5), np.full((8, 8), 0.7)) == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(0.946, abs=1e-3)
    with pytest.raises(ValueError):
        ssim(np.ones((4, 4)), np.ones((4, 4)))


def test_report_text():
    txt = MaskReport(0.1, 0.9, 0.8, 2 / 3).to_text()
    assert txt == "bce = 0.100000\naccuracy = 0.900000\nf1 = 0.800000\niou = 0.666667\n"
    assert format_report({"psnr": 25.0}) == "psnr = 25.000000\n"
