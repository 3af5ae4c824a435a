"""Joint training of encoder, contrastive heads, classifier and decoder with Adam."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor
from .checkpoint import Checkpoint, save_checkpoint
from .config import ConfigError, DetectorConfig, RunConfig
from .detector import Detection, NonFiniteEmbeddingError, children_flat, circle_loss, classifier_logits, detect_from_embeddings, embed
from .network import STAGES, Params, decode_restore, init_params
from .pnm import read_image

logger = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, term: str):
        super().__init__(f"non-finite {term} at step {step}")
        self.step, self.term = step, term


# ---------------------------------------------------------------- data

@dataclass
class Dataset:
    inputs: np.ndarray  # N x C x H x W
    targets: np.ndarray  # N x C x H x W
    masks: np.ndarray  # N x H x W binary, 1 = intact
    ratios: np.ndarray
    seeds: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)


def read_manifest(path: str | Path) -> list[tuple]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    rows = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        idx, gt, mask, inp, ratio, seed = line.split("\t")
        rows.append((int(idx), path.parent / gt, path.parent / mask, path.parent / inp, float(ratio), int(seed)))
    return rows


def load_dataset(path: str | Path) -> Dataset:
    rows = read_manifest(path)
    if not rows:
        return Dataset(*(np.zeros((0,)) for _ in range(5)))
    return Dataset(
        np.stack([read_image(r[3]) for r in rows]),
        np.stack([read_image(r[1]) for r in rows]),
        np.stack([read_image(r[2]) for r in rows]),
        np.array([r[4] for r in rows]),
        np.array([r[5] for r in rows]),
    )


def majority_downsample(mask: np.ndarray, factor: int) -> np.ndarray:
    """Block-downsample a binary mask; a block is corrupted when at least half its pixels are."""
    *lead, h, w = mask.shape
    blocks = mask.reshape(*lead, h // factor, factor, w // factor, factor)
    corrupted = (blocks < 0.5).sum(axis=(-3, -1))
    return (2 * corrupted < factor * factor).astype(np.float64)


def stage_masks(mask: np.ndarray) -> dict[int, np.ndarray]:
    return {s: majority_downsample(mask, 2 ** (4 - s)) for s in STAGES}


# ---------------------------------------------------------------- losses

def pixel_loss(restored: Tensor, target) -> Tensor:
    """Mean absolute error."""
    target = ad.as_tensor(target)
    if restored.shape != target.shape:
        raise ValueError(f"shape mismatch: {restored.shape} vs {target.shape}")
    return ad.tabs(restored - target).mean()


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    # log(1 + e^-|l|) + max(l, 0) - y l
    soft = ad.log1p(ad.exp(ad.tabs(logits) * -1.0)) + ad.relu(logits)
    return (soft - logits * labels).mean()


TERMS = ("pixel", "cl1", "cl2", "cl3", "cls")


@dataclass
class TrainRecord:
    step: int
    pixel: float
    cl1: float
    cl2: float
    cl3: float
    cls: float
    total: float
    wall: float = 0.0

    def log_line(self) -> str:
        vals = (self.pixel, self.cl1, self.cl2, self.cl3, self.cls, self.total)
        return f"{self.step}\t" + "\t".join(f"{v:.9g}" for v in vals)


def total_loss(terms: dict[str, Tensor], cfg: RunConfig, step: int = 0) -> tuple[Tensor, TrainRecord]:
    """Weighted sum lambda_pixel*L_pixel + lambda_cl*sum_s L_CL^s + lambda_cls*L_cls."""
    tc = cfg.train
    for name in TERMS:
        if not np.isfinite(terms[name].item()):
            raise TrainingAborted(step, name)
    cl = terms["cl1"] + terms["cl2"] + terms["cl3"]
    total = terms["pixel"] * tc.lambda_pixel + cl * tc.lambda_cl + terms["cls"] * tc.lambda_cls
    vals = {k: terms[k].item() for k in TERMS}
    return total, TrainRecord(step, **vals, total=total.item())


# ---------------------------------------------------------------- contrastive sampling

def _queries(
    labels: np.ndarray,
    candidates: np.ndarray,
    pool: np.ndarray,
    n_pos: int,
    n_neg: int,
    cap: int,
    rng: np.random.Generator,
):
    """Query indices with positives/negatives drawn by ground-truth label from ``pool``."""
    if candidates.size > cap:
        candidates = np.sort(rng.choice(candidates, size=cap, replace=False))
    pools = []
    for c in (0, 1):
        pc = pool[labels[pool] == c]
        if pc.size == 0:
            pc = np.flatnonzero(labels == c)
        if pc.size == 0:
            return None
        pools.append(pc)
    q_lab = labels[candidates]
    pos = np.empty((candidates.size, n_pos), dtype=np.intp)
    neg = np.empty((candidates.size, n_neg), dtype=np.intp)
    for c in (0, 1):
        rows = np.flatnonzero(q_lab == c)
        pos[rows] = pools[c][rng.integers(pools[c].size, size=(rows.size, n_pos))]
        neg[rows] = pools[1 - c][rng.integers(pools[1 - c].size, size=(rows.size, n_neg))]
    return candidates, pos, neg


def contrastive_indices(
    det_result: Detection, gt: dict[int, np.ndarray], det: DetectorConfig, rng: np.random.Generator
) -> dict[int, tuple | None]:
    """Per-stage (Q, P, N) flat indices for one sample.

    Stage 1 samples queries from the whole map; later stages draw them from the
    children of the model's own representative and uncertain pixels.
    """
    out = {}
    for s in STAGES:
        labels = (gt[s].reshape(-1) < 0.5).astype(np.intp)  # 1 = corrupted
        n = labels.size
        sel = det_result.selections.get(s - 1)
        if s == 1 or sel is None:
            cand = np.arange(n)
            pool = cand
            cap = det.n_queries if s == 1 else det.query_cap
        else:
            cand = sel.next_queries()
            pool = children_flat(sel.representatives, sel.grid[1])
            cap = det.query_cap
        out[s] = _queries(labels, cand, pool, det.n_pos, det.n_neg, cap, rng)
    return out


def classifier_targets(det_result: Detection, gt: dict[int, np.ndarray]):
    """Centres and 0/1 labels: the cluster overlapping the true corruption more is labelled 1."""
    centers, labels = [], []
    for s, cr in det_result.clusters.items():
        corrupted = gt[s].reshape(-1) < 0.5
        a = cr.assign.reshape(-1)
        frac = [corrupted[a == k].mean() if np.any(a == k) else np.nan for k in (0, 1)]
        if np.isnan(frac).any() or frac[0] == frac[1]:
            continue
        hi = int(np.argmax(frac))
        centers.append(cr.centers)
        labels.append([1.0 if k == hi else 0.0 for k in (0, 1)])
    if not centers:
        return None, None
    return np.concatenate(centers), np.concatenate(labels)


# ---------------------------------------------------------------- step

def loss_terms(params: Params, cfg: RunConfig, x: np.ndarray, y: np.ndarray, mask: np.ndarray, rng) -> dict[str, Tensor]:
    """Forward pass for one batch; call inside a Tape to get gradients."""
    model, det = cfg.model, cfg.detector
    feats, emb = embed(x, params, model)
    n = x.shape[0]
    grids = {s: tuple(feats[s].shape[2:]) for s in STAGES}
    gts = [stage_masks(mask[i]) for i in range(n)]

    terms: dict[str, Tensor] = {}
    cls_c, cls_y = [], []
    per_stage: dict[int, list] = {s: [] for s in STAGES}
    for i in range(n):
        seed = int(rng.integers(2**31))
        dres = detect_from_embeddings({s: emb[s].data[i] for s in STAGES}, grids, params, det, seed)
        idx = contrastive_indices(dres, gts[i], det, rng)
        for s in STAGES:
            if idx[s] is not None:
                off = i * grids[s][0] * grids[s][1]
                per_stage[s].append(tuple(a + off for a in idx[s]))
        c, lab = classifier_targets(dres, gts[i])
        if c is not None:
            cls_c.append(c)
            cls_y.append(lab)

    for s in STAGES:
        if not per_stage[s]:
            terms[f"cl{s}"] = Tensor(0.0)
            continue
        q, pos, neg = (np.concatenate(parts) for parts in zip(*per_stage[s]))
        flat = emb[s].reshape(-1, emb[s].shape[-1])
        loss = circle_loss(ad.take_rows(flat, q), ad.take_rows(flat, pos), ad.take_rows(flat, neg), det.tau_loss)
        terms[f"cl{s}"] = loss * (1.0 / n)

    if cls_c:
        terms["cls"] = bce_with_logits(classifier_logits(np.concatenate(cls_c), params), np.concatenate(cls_y))
    else:
        terms["cls"] = Tensor(0.0)

    masks = {s: np.stack([g[s] for g in gts]) for s in STAGES}
    _, restored = decode_restore(feats, masks, x, params, model)
    terms["pixel"] = pixel_loss(restored, y)
    return terms


def batch_indices(step: int, batch: int, n: int, seed: int) -> np.ndarray:
    """Sample indices for ``step``: consecutive slices of per-epoch seeded permutations."""
    pos = step * batch + np.arange(batch)
    epochs = pos // n
    out = np.empty(batch, dtype=np.intp)
    for e in np.unique(epochs):
        perm = np.random.default_rng([seed, 11, int(e)]).permutation(n)
        sel = epochs == e
        out[sel] = perm[pos[sel] % n]
    return out


# ---------------------------------------------------------------- loop

@dataclass
class TrainState:
    params: Params
    adam: AdamState
    rng: np.random.Generator
    step: int = 0

    def checkpoint(self, cfg: RunConfig) -> Checkpoint:
        return Checkpoint(
            cfg,
            {k: v.data.copy() for k, v in self.params.items()},
            self.step,
            AdamState([m.copy() for m in self.adam.m], [v.copy() for v in self.adam.v], self.adam.t,
                      self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps),
            self.rng.bit_generator.state,
        )


def init_state(cfg: RunConfig) -> TrainState:
    tc = cfg.train
    params = init_params(cfg.model, cfg.detector, tc.seed)
    for t in params.values():
        t.requires_grad = True
    adam = AdamState.for_params(list(params.values()), lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.adam_eps)
    return TrainState(params, adam, np.random.default_rng([tc.seed, 3]))


def state_from_checkpoint(ck: Checkpoint) -> TrainState:
    params = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in ck.params.items()}
    adam = ck.adam or AdamState.for_params(list(params.values()))
    tc = ck.config.train
    rng = np.random.default_rng()
    if ck.rng_state is not None:
        rng.bit_generator.state = ck.rng_state
    else:
        rng = np.random.default_rng([tc.seed, 3])
    adam.lr, adam.beta1, adam.beta2, adam.eps = tc.lr, tc.beta1, tc.beta2, tc.adam_eps
    return TrainState(params, adam, rng, ck.step)


def train_step(state: TrainState, cfg: RunConfig, data: Dataset) -> TrainRecord:
    tc = cfg.train
    t0 = time.perf_counter()
    idx = batch_indices(state.step, tc.batch_size, len(data), tc.seed)
    params = state.params
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        try:
            terms = loss_terms(params, cfg, data.inputs[idx], data.targets[idx], data.masks[idx], state.rng)
        except NonFiniteEmbeddingError:
            raise TrainingAborted(state.step + 1, "embedding") from None
        total, rec = total_loss(terms, cfg, state.step + 1)
    if not np.isfinite(rec.total):
        raise TrainingAborted(state.step + 1, "total")
    ad.backward(total, tape)
    plist = list(params.values())
    grads = [p.grad for p in plist]
    for p, g in zip(plist, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingAborted(state.step + 1, f"gradient of {p.name}")
    ad.adam_step(plist, grads, state.adam)
    for p in plist:
        if not np.all(np.isfinite(p.data)):
            raise TrainingAborted(state.step + 1, f"parameter {p.name}")
    state.step += 1
    rec.wall = time.perf_counter() - t0
    return rec


def train(
    data: Dataset,
    cfg: RunConfig,
    out: str | Path | None = None,
    state: TrainState | None = None,
    log_path: str | Path | None = None,
) -> tuple[TrainState, list[TrainRecord]]:
    """Run Adam until ``cfg.train.steps`` total steps, resuming from ``state`` if given."""
    if len(data) == 0:
        raise ConfigError("training manifest is empty")
    cfg.validate()
    state = state or init_state(cfg)
    records: list[TrainRecord] = []
    log = open(log_path, "a") if log_path else None
    try:
        while state.step < cfg.train.steps:
            good = state.checkpoint(cfg)
            try:
                rec = train_step(state, cfg, data)
            except TrainingAborted:
                if out is not None:
                    save_checkpoint(out, good)
                raise
            records.append(rec)
            if log:
                log.write(rec.log_line() + "\n")
            if rec.step % 50 == 0:
                logger.info("step %d total %.4f pixel %.4f (%.3fs)", rec.step, rec.total, rec.pixel, rec.wall)
            every = cfg.train.checkpoint_every
            if every and out is not None and rec.step % every == 0:
                save_checkpoint(out, state.checkpoint(cfg))
    finally:
        if log:
            log.close()
    if out is not None:
        save_checkpoint(out, state.checkpoint(cfg))
    return state, records
