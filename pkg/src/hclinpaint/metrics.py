"""Detection metrics (BCE, accuracy, F1, IoU on the corrupted class) and PSNR / SSIM."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

PSNR_CAP = 99.0


@dataclass
class MaskReport:
    bce: float
    accuracy: float
    f1: float
    iou: float

    def to_text(self) -> str:
        return format_report(asdict(self))


def format_report(values: dict[str, float]) -> str:
    return "".join(f"{k} = {v:.6f}\n" for k, v in values.items())


def mask_metrics(pred: np.ndarray, prob: np.ndarray, gt: np.ndarray) -> MaskReport:
    """Compare a predicted mask (1 = intact) against ground truth.

    ``prob`` is the predicted probability that each pixel is corrupted.
    """
    pred, prob, gt = (np.asarray(a, dtype=np.float64) for a in (pred, prob, gt))
    if not (pred.shape == prob.shape == gt.shape):
        raise ValueError(f"shape mismatch: pred {pred.shape}, prob {prob.shape}, gt {gt.shape}")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground-truth mask must be binary")
    pc, gc = pred < 0.5, gt < 0.5
    tp = np.sum(pc & gc)
    fp = np.sum(pc & ~gc)
    fn = np.sum(~pc & gc)
    acc = float(np.mean(pc == gc))
    denom = tp + fp + fn
    # no corrupted pixel in either mask counts as a perfect match
    iou = 1.0 if denom == 0 else tp / denom
    f1 = 1.0 if denom == 0 else 2 * tp / (2 * tp + fp + fn)
    p = np.clip(prob, 1e-7, 1 - 1e-7)
    y = gc.astype(np.float64)
    bce = float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
    return MaskReport(bce, acc, float(f1), float(iou))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=0) if img.ndim == 3 else img


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over non-overlapping ``window`` x ``window`` tiles of the channel-mean images."""
    ga, gb = _gray(a), _gray(b)
    if ga.shape != gb.shape:
        raise ValueError(f"shape mismatch: {ga.shape} vs {gb.shape}")
    h, w = ga.shape
    if min(h, w) < window:
        raise ValueError(f"image {h}x{w} smaller than the {window}x{window} window")
    h, w = h - h % window, w - w % window

    def tiles(x):
        return x[:h, :w].reshape(h // window, window, w // window, window).transpose(0, 2, 1, 3).reshape(-1, window * window)

    ta, tb = tiles(ga), tiles(gb)
    c1, c2 = k1**2, k2**2
    mu_a, mu_b = ta.mean(axis=1), tb.mean(axis=1)
    va, vb = ta.var(axis=1), tb.var(axis=1)
    cov = ((ta - mu_a[:, None]) * (tb - mu_b[:, None])).mean(axis=1)
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
    return float(s.mean())
