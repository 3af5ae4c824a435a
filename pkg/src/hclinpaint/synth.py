"""Synthetic corrupted images: irregular brush masks, alpha-blended edges, noise fills.

A corrupted input is ``gt * m + noise * (1 - m)`` where ``m`` is 1 on intact pixels
and 0 on corrupted ones.  Ground truths are smooth procedural images; the
``image`` noise kind draws from a high-frequency procedural family so the two
are distinguishable at desk scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

logger = logging.getLogger(__name__)

MAX_STROKES = 6
MAX_ATTEMPTS = 50


class MaskGenerationError(RuntimeError):
    def __init__(self, achieved: float, lo: float, hi: float):
        super().__init__(f"could not hit corruption ratio [{lo}, {hi}] after {MAX_ATTEMPTS} attempts; last {achieved:.4f}")
        self.achieved = achieved


@dataclass
class CorruptionMask:
    values: np.ndarray  # H x W, 1 = intact, 0 = corrupted

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.values.shape}")
        if self.values.min(initial=1.0) < 0 or self.values.max(initial=0.0) > 1:
            raise ValueError("mask values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def binary(self) -> bool:
        return bool(np.all((self.values == 0) | (self.values == 1)))

    @property
    def ratio(self) -> float:
        return float(np.mean(1.0 - self.values))


@dataclass
class CorruptedSample:
    ground_truth: np.ndarray  # C x H x W
    mask: CorruptionMask
    noise: np.ndarray
    input: np.ndarray


@dataclass
class NoiseSource:
    kind: str = "image"  # constant | uniform | image
    value: float = 0.5
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "image"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not (0.0 <= self.lo <= self.hi <= 1.0 and 0.0 <= self.value <= 1.0):
            raise ValueError("noise parameters must lie in [0, 1]")

    def sample(self, channels: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "constant":
            return np.full((channels, h, w), self.value)
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi, size=(channels, h, w))
        return texture_image(channels, h, w, rng)


def smooth_image(channels: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency sinusoid plus gradient mixture, rescaled into [0.1, 0.9]."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    out = np.empty((channels, h, w))
    for c in range(channels):
        img = rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy
        for _ in range(3):
            fx, fy = rng.uniform(-1.5, 1.5, size=2)
            img = img + rng.uniform(0.2, 1.0) * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
        lo, hi = img.min(), img.max()
        span = rng.uniform(0.4, 0.8)
        base = rng.uniform(0.1, 0.9 - span)
        out[c] = base + span * (img - lo) / (hi - lo + 1e-12)
    return out


def texture_image(channels: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """High-frequency checker/stripe/noise mixture in [0, 1]."""
    yy, xx = np.mgrid[0:h, 0:w]
    period = rng.integers(2, 5)
    checker = ((xx // period + yy // period) % 2).astype(np.float64)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.6, 1.4)
    stripes = 0.5 + 0.5 * np.sign(np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy)))
    wc, ws = rng.dirichlet([1.0, 1.0, 1.0])[:2]
    out = np.empty((channels, h, w))
    for c in range(channels):
        a, b = np.sort(rng.uniform(0, 1, size=2))
        pattern = wc * checker + ws * stripes + (1 - wc - ws) * rng.uniform(0, 1, size=(h, w))
        out[c] = a + (b - a + 0.3) * pattern
    return np.clip(out, 0.0, 1.0)


def _stroke(mask: np.ndarray, rng: np.random.Generator) -> None:
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    y, x = rng.uniform(0, h), rng.uniform(0, w)
    heading = rng.uniform(0, 2 * np.pi)
    radius = rng.uniform(3, 9) / 2
    for _ in range(rng.integers(4, 11)):
        heading += rng.uniform(-np.pi / 3, np.pi / 3)
        length = rng.uniform(0.08, 0.25) * max(h, w)
        ny = np.clip(y + length * np.sin(heading), 0, h - 1)
        nx = np.clip(x + length * np.cos(heading), 0, w - 1)
        # distance from every pixel to segment (y, x) -> (ny, nx)
        dy, dx = ny - y, nx - x
        seg2 = dy * dy + dx * dx
        t = np.clip(((yy - y) * dy + (xx - x) * dx) / seg2, 0, 1) if seg2 > 0 else np.zeros_like(yy, dtype=float)
        dist2 = (yy - (y + t * dy)) ** 2 + (xx - (x + t * dx)) ** 2
        mask[dist2 <= radius * radius] = 0.0
        y, x = ny, nx


def generate_irregular_mask(h: int, w: int, ratio_range: tuple[float, float], seed: int) -> CorruptionMask:
    """Binary brush-stroke mask whose corrupted fraction lies in ``ratio_range``."""
    lo, hi = ratio_range
    if not (0.0 <= lo <= hi <= 0.9):
        raise ValueError(f"ratio range must satisfy 0 <= lo <= hi <= 0.9, got {ratio_range}")
    if h < 8 or w < 8:
        raise ValueError(f"mask must be at least 8x8, got {h}x{w}")
    rng = np.random.default_rng(seed)
    achieved = 0.0
    for _ in range(MAX_ATTEMPTS):
        target = rng.uniform(lo, hi)
        mask = np.ones((h, w))
        for _ in range(MAX_STROKES):
            if 1.0 - mask.mean() >= target:
                break
            _stroke(mask, rng)
        achieved = 1.0 - mask.mean()
        if lo <= achieved <= hi:
            return CorruptionMask(mask)
    raise MaskGenerationError(achieved, lo, hi)


def alpha_blend_mask(mask: CorruptionMask, band: int = 2) -> CorruptionMask:
    """Soften the inner edge of corrupted regions with a linear ramp ``band`` pixels wide.

    Intact pixels stay at 1.  A corrupted pixel whose centre sits ``b`` pixels from
    the region boundary gets ``(band - b) / (band + 0.5)`` clipped at 0, so the ramp
    runs from the last intact pixel down to 0 at distance ``band``.
    """
    if band < 0:
        raise ValueError("band must be >= 0")
    m = mask.values
    if band == 0 or m.min() == 1.0 or m.max() == 0.0:
        return CorruptionMask(m.copy())
    d = distance_transform_edt(m < 0.5)  # distance of corrupted pixels to nearest intact pixel
    soft = np.clip((band - (d - 0.5)) / (band + 0.5), 0.0, 1.0)
    return CorruptionMask(np.where(m >= 0.5, m, soft))


def compose_corrupted(o_gt: np.ndarray, mask: CorruptionMask, noise: np.ndarray) -> CorruptedSample:
    if o_gt.shape != noise.shape or o_gt.shape[-2:] != mask.values.shape:
        raise ValueError(f"shape mismatch: gt {o_gt.shape}, mask {mask.values.shape}, noise {noise.shape}")
    m = mask.values
    return CorruptedSample(o_gt, mask, noise, o_gt * m + noise * (1.0 - m))


def make_sample(
    image_size: int,
    ratio_range: tuple[float, float],
    noise: NoiseSource,
    seed: int,
    band: int = 2,
    channels: int = 3,
) -> tuple[CorruptedSample, CorruptionMask]:
    """One corrupted sample and its binary (pre-blend) supervision mask."""
    rng = np.random.default_rng([seed, 1])
    gt = smooth_image(channels, image_size, image_size, rng)
    binary = generate_irregular_mask(image_size, image_size, ratio_range, seed)
    n = noise.sample(channels, image_size, image_size, rng)
    return compose_corrupted(gt, alpha_blend_mask(binary, band), n), binary


def make_dataset(
    count: int,
    image_size: int,
    ratio_range: tuple[float, float],
    noise: NoiseSource,
    seed: int,
    out_dir: str | Path,
    band: int = 2,
) -> Path:
    """Write ``count`` (gt, mask, input) triples and a tab-separated manifest."""
    from .pnm import write_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(count):
        sample_seed = seed + i
        sample, binary = make_sample(image_size, ratio_range, noise, sample_seed, band)
        names = (f"gt_{i:05d}.ppm", f"mask_{i:05d}.pgm", f"input_{i:05d}.ppm")
        write_image(out / names[0], sample.ground_truth)
        write_image(out / names[1], binary.values)
        write_image(out / names[2], sample.input)
        lines.append(f"{i}\t{names[0]}\t{names[1]}\t{names[2]}\t{binary.ratio:.6f}\t{sample_seed}\n")
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(lines))
    logger.info("wrote %d samples to %s", count, out)
    return manifest
