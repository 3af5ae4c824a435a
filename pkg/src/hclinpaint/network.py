"""Hierarchical transformer encoder/decoder with mask-biased windowed attention.

Feature maps are N x D x h x w.  Stage 1 is the coarsest (H/8), stage 3 the
finest (H/2).  Transformer blocks run on window-partitioned tokens.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import DetectorConfig, ModelConfig

Params = dict[str, Tensor]
STAGES = (1, 2, 3)


class ContractError(ValueError):
    pass


def stage_size(image_size: int, s: int) -> int:
    return image_size >> (4 - s)


# ---------------------------------------------------------------- init

def _dense(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


def _conv(rng, d: int, c: int, k: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(c * k * k), size=(d, c, k, k))


def _block_params(p: dict, prefix: str, d: int, ratio: int, rng) -> None:
    p[f"{prefix}.ln1_g"] = np.ones(d)
    p[f"{prefix}.ln1_b"] = np.zeros(d)
    p[f"{prefix}.qkv_w"] = _dense(rng, d, 3 * d)
    p[f"{prefix}.qkv_b"] = np.zeros(3 * d)
    p[f"{prefix}.proj_w"] = _dense(rng, d, d)
    p[f"{prefix}.proj_b"] = np.zeros(d)
    p[f"{prefix}.ln2_g"] = np.ones(d)
    p[f"{prefix}.ln2_b"] = np.zeros(d)
    p[f"{prefix}.fc1_w"] = _dense(rng, d, ratio * d)
    p[f"{prefix}.fc1_b"] = np.zeros(ratio * d)
    p[f"{prefix}.fc2_w"] = _dense(rng, ratio * d, d)
    p[f"{prefix}.fc2_b"] = np.zeros(d)


def init_params(model: ModelConfig, det: DetectorConfig, seed: int) -> Params:
    """All learnable tensors (network, projection heads, classifier) by name."""
    rng = np.random.default_rng([seed, 7])
    p: dict[str, np.ndarray] = {}
    cs, (d1, d2, d3) = model.stem_channels, model.widths
    widths = {1: d1, 2: d2, 3: d3}
    area = model.window * model.window

    p["stem.w"] = _conv(rng, cs, model.in_channels, 5) * np.sqrt(2.0)
    p["stem.b"] = np.zeros(cs)
    prev = cs
    for s in (3, 2, 1):
        d = widths[s]
        p[f"enc{s}.down_w"] = _conv(rng, d, prev, 3)
        p[f"enc{s}.down_b"] = np.zeros(d)
        p[f"enc{s}.pos"] = rng.normal(0.0, 0.02, size=(area, d))
        for i in range(model.blocks_per_stage):
            _block_params(p, f"enc{s}.blk{i}", d, model.mlp_ratio, rng)
        prev = d

    for s in STAGES:
        d = widths[s]
        if s > 1:
            p[f"dec{s}.up_w"] = _conv(rng, d, widths[s - 1], 3)
            p[f"dec{s}.up_b"] = np.zeros(d)
        p[f"dec{s}.hole"] = np.zeros(d)
        p[f"dec{s}.pos"] = rng.normal(0.0, 0.02, size=(area, d))
        for i in range(model.blocks_per_stage):
            _block_params(p, f"dec{s}.blk{i}", d, model.mlp_ratio, rng)
    p["out.up_w"] = _conv(rng, cs, d3, 3)
    p["out.up_b"] = np.zeros(cs)
    p["out.w"] = _conv(rng, model.in_channels, cs, 5) * 0.1
    p["out.b"] = np.zeros(model.in_channels)

    de = det.embed_dim
    for s in STAGES:
        fin = widths[s] + (det.map_dim if s > 1 else 0)
        if s > 1:
            p[f"proj{s}.map_w"] = _dense(rng, de, det.map_dim)
            p[f"proj{s}.map_b"] = np.zeros(det.map_dim)
        p[f"proj{s}.fc1_w"] = _dense(rng, fin, det.proj_hidden)
        p[f"proj{s}.fc1_b"] = np.zeros(det.proj_hidden)
        p[f"proj{s}.fc2_w"] = _dense(rng, det.proj_hidden, de)
        p[f"proj{s}.fc2_b"] = np.zeros(de)
    p["cls.fc1_w"] = _dense(rng, de, det.classifier_hidden)
    p["cls.fc1_b"] = np.zeros(det.classifier_hidden)
    p["cls.fc2_w"] = _dense(rng, det.classifier_hidden, 1)
    p["cls.fc2_b"] = np.zeros(1)
    return {k: Tensor(v, name=k) for k, v in p.items()}


# ---------------------------------------------------------------- windows

def window_partition(x: Tensor, window: int) -> Tensor:
    """N x D x h x w  ->  (N * nwin) x window^2 x D."""
    n, d, h, w = x.shape
    x = x.reshape(n, d, h // window, window, w // window, window)
    x = x.transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(n * (h // window) * (w // window), window * window, d)


def window_reverse(x: Tensor, window: int, n: int, h: int, w: int) -> Tensor:
    d = x.shape[-1]
    x = x.reshape(n, h // window, w // window, window, window, d)
    x = x.transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(n, d, h, w)


def mask_windows(mask: np.ndarray, window: int) -> np.ndarray:
    """N x h x w mask -> (N * nwin) x window^2, same token order as window_partition."""
    n, h, w = mask.shape
    m = mask.reshape(n, h // window, window, w // window, window).transpose(0, 1, 3, 2, 4)
    return m.reshape(-1, window * window)


def mask_bias(mask: np.ndarray, gamma: float) -> np.ndarray:
    """Additive attention bias ``gamma * (m - 1)``: 0 on intact, -gamma on corrupted."""
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError("mask_bias needs a binary mask")
    if gamma <= 0:
        raise ContractError("gamma must be positive")
    return gamma * (mask - 1.0)


# ---------------------------------------------------------------- attention / blocks

def window_attention(x: Tensor, bias: np.ndarray | None, p: Params, prefix: str, heads: int) -> Tensor:
    """Multi-head attention inside each window.  ``x``: B x n x d; ``bias``: B x n over keys."""
    b, n, d = x.shape
    if d % heads:
        raise ContractError(f"width {d} not divisible by {heads} heads")
    dk = d // heads
    qkv = ad.linear(x, p[f"{prefix}.qkv_w"], p[f"{prefix}.qkv_b"])
    qkv = qkv.reshape(b, n, 3, heads, dk).transpose(2, 0, 3, 1, 4)  # 3 x B x heads x n x dk
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dk))
    if bias is not None:
        logits = logits + bias[:, None, None, :]
    att = ad.softmax(logits)
    out = ad.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return ad.linear(out, p[f"{prefix}.proj_w"], p[f"{prefix}.proj_b"])


def mca_attention(
    x: Tensor,
    mask: np.ndarray | None,
    p: Params,
    prefix: str,
    grid: tuple[int, int],
    heads: int,
    window: int,
    gamma: float,
) -> Tensor:
    """Mask-guided windowed attention over an h x w token grid.

    ``x`` is (h*w) x d in raster order, ``mask`` a binary h x w map (1 = intact)
    or None for no bias.
    """
    h, w = grid
    n, d = x.shape
    if n != h * w or h % window or w % window:
        raise ContractError(f"{n} tokens do not tile a {h}x{w} grid into {window}x{window} windows")
    fmap = x.transpose(1, 0).reshape(1, d, h, w)
    xw = window_partition(fmap, window)
    bias = None if mask is None else mask_bias(mask_windows(np.asarray(mask)[None], window), gamma)
    out = window_attention(xw, bias, p, prefix, heads)
    return window_reverse(out, window, 1, h, w).reshape(d, n).transpose(1, 0)


def transformer_block(x: Tensor, bias: np.ndarray | None, p: Params, prefix: str, heads: int) -> Tensor:
    """Pre-norm block: x + MCA(LN(x)), then + MLP(LN(.)) with GELU."""
    h = ad.layernorm(x, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
    x = x + window_attention(h, bias, p, prefix, heads)
    h = ad.layernorm(x, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])
    h = ad.gelu(ad.linear(h, p[f"{prefix}.fc1_w"], p[f"{prefix}.fc1_b"]))
    return x + ad.linear(h, p[f"{prefix}.fc2_w"], p[f"{prefix}.fc2_b"])


def _roll(x: Tensor, shift: int) -> Tensor:
    idx = np.roll(np.arange(x.shape[-1]), shift)
    return x[..., idx][..., idx, :]


def run_blocks(fmap: Tensor, mask: np.ndarray | None, p: Params, prefix: str, cfg: ModelConfig) -> Tensor:
    """Positional embedding plus ``blocks_per_stage`` transformer blocks on an N x D x h x w map."""
    n, d, h, w = fmap.shape
    ws = cfg.window
    bias = None if mask is None else mask_bias(mask_windows(mask, ws), cfg.gamma)
    x = window_partition(fmap, ws) + p[f"{prefix}.pos"]
    for i in range(cfg.blocks_per_stage):
        shifted = cfg.shift_windows and i % 2 == 1
        if shifted:
            # cyclic shift by half a window; re-partition with the rolled mask
            fm = _roll(window_reverse(x, ws, n, h, w), -(ws // 2))
            x = window_partition(fm, ws)
            b = None if mask is None else mask_bias(mask_windows(np.roll(mask, (-(ws // 2),) * 2, axis=(1, 2)), ws), cfg.gamma)
        else:
            b = bias
        x = transformer_block(x, b, p, f"{prefix}.blk{i}", cfg.heads)
        if shifted:
            fm = _roll(window_reverse(x, ws, n, h, w), ws // 2)
            x = window_partition(fm, ws)
    return window_reverse(x, ws, n, h, w)


# ---------------------------------------------------------------- encoder / decoder

def _batched(image) -> Tensor:
    t = ad.as_tensor(image)
    return t.reshape(1, *t.shape) if t.ndim == 3 else t


def encode(image, p: Params, cfg: ModelConfig) -> dict:
    """Stem plus three downsampling stages.  Returns {'stem': .., 1: .., 2: .., 3: ..}."""
    x = _batched(image)
    h, w = x.shape[-2:]
    if h % 8 or w % 8:
        raise ContractError(f"image size {h}x{w} must be divisible by 8")
    if (h // 8) % cfg.window or (w // 8) % cfg.window:
        raise ContractError(f"image size {h}x{w} does not tile the coarsest stage into {cfg.window}x{cfg.window} windows")
    stem = ad.gelu(ad.conv2d(x - 0.5, p["stem.w"], p["stem.b"], stride=1, pad=2))
    feats = {"stem": stem}
    cur = stem
    for s in (3, 2, 1):
        cur = ad.conv2d(cur, p[f"enc{s}.down_w"], p[f"enc{s}.down_b"], stride=2, pad=1)
        cur = run_blocks(cur, None, p, f"enc{s}", cfg)
        feats[s] = cur
    return feats


def upsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    return mask.repeat(factor, axis=-2).repeat(factor, axis=-1)


def decode(feats: dict, masks: dict, p: Params, cfg: ModelConfig) -> Tensor:
    """Content image in [0, 1] guided by per-stage binary masks (N x h x w each)."""
    for s in STAGES:
        if s not in masks:
            raise ContractError(f"missing mask for stage {s}")
    x = None
    for s in STAGES:
        m = np.asarray(masks[s], dtype=np.float64)
        skip = feats[s]
        if m.shape != (skip.shape[0],) + skip.shape[2:]:
            raise ContractError(f"stage {s} mask shape {m.shape} does not match features {skip.shape}")
        m4 = m[:, None]
        # corrupted positions drop their encoder content and get a learned hole token
        hole = p[f"dec{s}.hole"].reshape(1, -1, 1, 1) * (1.0 - m4)
        y = skip * m4 + hole
        if x is not None:
            up = ad.conv2d(ad.upsample2x(x), p[f"dec{s}.up_w"], p[f"dec{s}.up_b"], stride=1, pad=1)
            y = y + up
        x = run_blocks(y, m, p, f"dec{s}", cfg)
    m_full = upsample_mask(np.asarray(masks[3], dtype=np.float64), 2)[:, None]
    y = ad.conv2d(ad.upsample2x(x), p["out.up_w"], p["out.up_b"], stride=1, pad=1)
    y = ad.gelu(y + feats["stem"] * m_full)
    return ad.sigmoid(ad.conv2d(y, p["out.w"], p["out.b"], stride=1, pad=2))


def compose(image, content: Tensor, finest_mask: np.ndarray) -> Tensor:
    """``image * M + content * (1 - M)`` with the finest mask upsampled to full size."""
    m = upsample_mask(np.asarray(finest_mask, dtype=np.float64), 2)[:, None]
    img = _batched(image)
    return img * m + content * (1.0 - m)


def decode_restore(feats: dict, masks: dict, image, p: Params, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    content = decode(feats, masks, p, cfg)
    return content, compose(image, content, masks[3])
