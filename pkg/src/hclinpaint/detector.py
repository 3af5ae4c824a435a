"""Corruption detection by hierarchical pixel-level contrastive learning.

Per stage: project encoder features to unit embeddings, split them into two
clusters, decide which cluster is corrupted with a small classifier, and score
each pixel's confidence.  Stages 2 and 3 reuse the parent embedding through a
linear map, inherit confident labels through the quadtree and only re-predict
children of uncertain pixels.

Cluster indices are 0/1 and masks use 1 = intact, 0 = corrupted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import DetectorConfig, ModelConfig
from .network import STAGES, ContractError, Params, encode

logger = logging.getLogger(__name__)


class DegenerateClusterError(RuntimeError):
    """All embeddings coincide, so there is nothing to split."""


class NonFiniteEmbeddingError(ArithmeticError):
    """Embeddings contain NaN or inf, usually after a diverged update."""


class SelectionError(RuntimeError):
    def __init__(self, cluster: int):
        super().__init__(f"cluster {cluster} has no representative pixels")
        self.cluster = cluster


class RefinementError(RuntimeError):
    pass


# ---------------------------------------------------------------- quadtree

def quad_children(i: int, j: int, h: int, w: int) -> list[tuple[int, int]]:
    """Children of parent cell (i, j) on an h x w grid, at the 2h x 2w grid."""
    if not (0 <= i < h and 0 <= j < w):
        raise ContractError(f"({i}, {j}) outside {h}x{w} grid")
    return [(2 * i + a, 2 * j + b) for a in (0, 1) for b in (0, 1)]


def quad_parent(i: int, j: int, h: int, w: int) -> tuple[int, int]:
    """Parent of cell (i, j) on the fine h x w grid."""
    if not (0 <= i < h and 0 <= j < w):
        raise ContractError(f"({i}, {j}) outside {h}x{w} grid")
    return i // 2, j // 2


def children_flat(idx: np.ndarray, w: int) -> np.ndarray:
    """Flat raster indices of the four children of flat parent indices on a width-w grid."""
    idx = np.asarray(idx, dtype=np.intp)
    i, j = np.divmod(idx, w)
    fw = 2 * w
    base = (2 * i) * fw + 2 * j
    return (base[:, None] + np.array([0, 1, fw, fw + 1])).reshape(-1)


def upsample_grid(a: np.ndarray) -> np.ndarray:
    return a.repeat(2, axis=-2).repeat(2, axis=-1)


# ---------------------------------------------------------------- projection

def _to_tokens(fmap: Tensor) -> Tensor:
    n, d, h, w = fmap.shape
    return fmap.transpose(0, 2, 3, 1).reshape(n, h * w, d)


def project(features: Tensor, parent: Tensor | None, p: Params, s: int) -> Tensor:
    """Unit embeddings N x (h*w) x d_e for stage ``s`` features (N x D x h x w).

    For s >= 2 each pixel's input is its own feature concatenated with the
    linearly mapped embedding of its quadtree parent.
    """
    x = _to_tokens(features)
    if s > 1:
        if parent is None:
            raise ContractError(f"stage {s} projection needs the stage {s - 1} embeddings")
        n, _, h, w = features.shape
        if parent.shape[:2] != (n, (h // 2) * (w // 2)):
            raise ContractError(f"parent embeddings {parent.shape} do not match a {h // 2}x{w // 2} grid")
        mapped = ad.linear(parent, p[f"proj{s}.map_w"], p[f"proj{s}.map_b"])
        m = mapped.shape[-1]
        grid = mapped.reshape(n, h // 2, w // 2, m).transpose(0, 3, 1, 2)
        x = ad.concat([x, _to_tokens(ad.upsample2x(grid))], axis=-1)
    hdn = ad.gelu(ad.linear(x, p[f"proj{s}.fc1_w"], p[f"proj{s}.fc1_b"]))
    return ad.l2_normalize(ad.linear(hdn, p[f"proj{s}.fc2_w"], p[f"proj{s}.fc2_b"]))


def project_all(feats: dict, p: Params) -> dict[int, Tensor]:
    emb: dict[int, Tensor] = {}
    prev = None
    for s in STAGES:
        prev = emb[s] = project(feats[s], prev, p, s)
    return emb


# ---------------------------------------------------------------- contrastive loss

def circle_loss(queries: Tensor, positives: Tensor, negatives: Tensor, tau: float) -> Tensor:
    """sum_q log(1 + sum_p exp(-e_q.e_p / tau) * sum_n exp(e_q.e_n / tau)).

    ``queries`` is Q x d, ``positives`` Q x P x d, ``negatives`` Q x N x d.
    """
    nq = queries.shape[0]
    if nq == 0:
        return Tensor(0.0)
    if positives.ndim != 3 or positives.shape[1] == 0:
        raise ContractError("every query needs at least one positive")
    if negatives.ndim != 3 or negatives.shape[1] == 0:
        raise ContractError("every query needs at least one negative")
    q = queries.reshape(nq, 1, queries.shape[-1])
    sp = (q * positives).sum(axis=-1)
    sn = (q * negatives).sum(axis=-1)
    pos = ad.exp(sp * (-1.0 / tau)).sum(axis=-1)
    neg = ad.exp(sn * (1.0 / tau)).sum(axis=-1)
    return ad.log1p(pos * neg).sum()


# ---------------------------------------------------------------- clustering

@dataclass
class ClusterResult:
    stage: int
    grid: tuple[int, int]
    centers: np.ndarray  # 2 x d_e, unit rows
    assign: np.ndarray  # h x w in {0, 1}
    corrupted_index: int
    probs: np.ndarray  # classifier P(corrupted) per center
    z: np.ndarray  # confidence of each pixel in its own cluster
    mask: np.ndarray  # h x w, 1 = intact
    p_corrupted: np.ndarray  # h x w, softmax weight on the corrupted center
    refined: np.ndarray | None = None  # h x w bool, stage >= 2 only
    objective: list[float] = field(default_factory=list)

    @property
    def masks(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.assign == 0).astype(np.uint8), (self.assign == 1).astype(np.uint8)


@dataclass
class KMeansResult:
    centers: np.ndarray
    assign: np.ndarray
    objective: list[float]
    iterations: int


def _normalize_rows(a: np.ndarray) -> np.ndarray:
    return a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)


def kmeans_init(emb: np.ndarray, n_candidates: int, rng: np.random.Generator) -> np.ndarray:
    """The two most mutually dissimilar embeddings among a seeded random candidate subset."""
    n = emb.shape[0]
    cand = np.sort(rng.choice(n, size=min(n_candidates, n), replace=False))
    sims = emb[cand] @ emb[cand].T
    i, j = np.unravel_index(np.argmin(sims), sims.shape)
    return emb[cand[[i, j]]].copy()


def kmeans_cosine(
    emb: np.ndarray,
    init: np.ndarray | None = None,
    max_iter: int = 20,
    rng: np.random.Generator | None = None,
    n_candidates: int = 64,
) -> KMeansResult:
    """Two-centre spherical K-means under cosine distance 1 - e.c."""
    emb = np.asarray(emb, dtype=np.float64)
    if emb.shape[0] < 2:
        raise ContractError("k-means needs at least two embeddings")
    if max_iter < 1:
        raise ContractError("max_iter must be >= 1")
    if np.ptp(emb, axis=0).max() < 1e-9:
        raise DegenerateClusterError("all embeddings are identical")
    if init is None:
        init = kmeans_init(emb, n_candidates, rng if rng is not None else np.random.default_rng(0))
    centers = _normalize_rows(np.asarray(init, dtype=np.float64))
    assign = None
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        sims = emb @ centers.T
        new = np.argmax(sims, axis=1)
        obj = float(np.sum(1.0 - sims[np.arange(len(new)), new]))
        if history:
            assert obj <= history[-1] + 1e-9 * len(new), "k-means objective increased"
        history.append(obj)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in (0, 1):
            members = emb[assign == k]
            if len(members):
                s = members.sum(axis=0)
                norm = np.linalg.norm(s)
                if norm > 1e-12:
                    centers[k] = s / norm
        obj = float(np.sum(1.0 - np.sum(emb * centers[assign], axis=1)))
        assert obj <= history[-1] + 1e-9 * len(new), "k-means objective increased"
        history.append(obj)
    return KMeansResult(centers, assign, history, it)


# ---------------------------------------------------------------- classifier / confidence

def classifier_logits(centers, p: Params) -> Tensor:
    h = ad.relu(ad.linear(ad.as_tensor(centers), p["cls.fc1_w"], p["cls.fc1_b"]))
    return ad.linear(h, p["cls.fc2_w"], p["cls.fc2_b"]).reshape(-1)


def classify_centers(centers: np.ndarray, p: Params, counts=None) -> tuple[int, np.ndarray]:
    """Index of the corrupted centre and P(corrupted) for each centre.

    An exact tie goes to the centre with fewer pixels (``counts``).
    """
    logits = classifier_logits(centers, p).data
    probs = 0.5 * (1.0 + np.tanh(0.5 * logits))
    if probs[0] == probs[1]:
        if counts is None:
            return 0, probs
        return int(np.argmin(counts)), probs
    return int(np.argmax(probs)), probs


def confidence(
    emb: np.ndarray, centers: np.ndarray, assign: np.ndarray, tau: float, printed_sign: bool = False
) -> np.ndarray:
    """Softmax weight of each pixel's own centre, exp(e.c_y/tau) / sum_i exp(e.c_i/tau).

    ``printed_sign`` flips the similarity sign inside the exponent.
    """
    sims = emb @ centers.T / tau
    if printed_sign:
        sims = -sims
    sims = sims - sims.max(axis=1, keepdims=True)
    e = np.exp(sims)
    soft = e / e.sum(axis=1, keepdims=True)
    return soft[np.arange(len(assign)), np.asarray(assign).reshape(-1)]


def _p_corrupted(emb, centers, corrupted_index, tau) -> np.ndarray:
    return confidence(emb, centers, np.full(len(emb), corrupted_index), tau)


# ---------------------------------------------------------------- selection

@dataclass
class SampleSelection:
    representatives: np.ndarray  # flat indices
    rep_labels: np.ndarray  # cluster index of each representative
    uncertain: np.ndarray  # flat indices
    grid: tuple[int, int]

    def next_queries(self) -> np.ndarray:
        """Flat child indices of representatives and uncertain pixels at the next stage."""
        w = self.grid[1]
        return np.union1d(children_flat(self.representatives, w), children_flat(self.uncertain, w))


def select_samples(
    z: np.ndarray,
    assign: np.ndarray,
    theta_hi: float,
    theta_lo: float,
    cap: int,
    rng: np.random.Generator,
) -> SampleSelection:
    """Representatives (z >= theta_hi, at most ``cap`` per cluster) and uncertain pixels (z <= theta_lo)."""
    if not 0.5 <= theta_lo < theta_hi <= 1.0:
        raise ContractError(f"need 0.5 <= theta_lo < theta_hi <= 1, got {theta_lo}, {theta_hi}")
    zf, af = z.reshape(-1), assign.reshape(-1)
    reps, labels = [], []
    for k in (0, 1):
        idx = np.flatnonzero((zf >= theta_hi) & (af == k))
        if idx.size == 0:
            raise SelectionError(k)
        if idx.size > cap:
            idx = np.sort(rng.choice(idx, size=cap, replace=False))
        reps.append(idx)
        labels.append(np.full(idx.size, k))
    uncertain = np.flatnonzero(zf <= theta_lo)
    return SampleSelection(np.concatenate(reps), np.concatenate(labels), uncertain, z.shape)


def select_with_fallback(z, assign, theta_hi, theta_lo, cap, rng) -> SampleSelection:
    """select_samples, falling back to top-``cap`` by z inside any cluster lacking representatives."""
    try:
        return select_samples(z, assign, theta_hi, theta_lo, cap, rng)
    except SelectionError:
        pass
    zf, af = z.reshape(-1), assign.reshape(-1)
    uncertain = set(np.flatnonzero(zf <= theta_lo).tolist())
    reps, labels = [], []
    for k in (0, 1):
        members = np.flatnonzero(af == k)
        strong = members[zf[members] >= theta_hi]
        if strong.size:
            idx = strong if strong.size <= cap else np.sort(rng.choice(strong, size=cap, replace=False))
        else:
            order = members[np.argsort(-zf[members], kind="stable")]
            idx = np.sort(order[:cap])
            uncertain.difference_update(idx.tolist())
        reps.append(idx)
        labels.append(np.full(idx.size, k))
    return SampleSelection(
        np.concatenate(reps).astype(np.intp),
        np.concatenate(labels),
        np.array(sorted(uncertain), dtype=np.intp),
        z.shape,
    )


# ---------------------------------------------------------------- per-stage results

def first_stage(emb: np.ndarray, grid, p: Params, det: DetectorConfig, rng) -> ClusterResult:
    km = kmeans_cosine(emb, None, det.kmeans_iters, rng, det.kmeans_candidates)
    counts = np.bincount(km.assign, minlength=2)
    ci, probs = classify_centers(km.centers, p, counts)
    z = confidence(emb, km.centers, km.assign, det.tau_conf, det.printed_confidence_sign)
    mask = (km.assign != ci).astype(np.float64)
    return ClusterResult(
        1, grid, km.centers, km.assign.reshape(grid), ci, probs, z.reshape(grid), mask.reshape(grid),
        _p_corrupted(emb, km.centers, ci, det.tau_conf).reshape(grid), None, km.objective,
    )


def _group_centers(emb: np.ndarray, idx: np.ndarray, labels: np.ndarray) -> np.ndarray:
    centers = np.zeros((2, emb.shape[1]))
    for k in (0, 1):
        members = idx[labels == k]
        if members.size == 0:
            raise RefinementError(f"no representative children carry label {k}")
        s = emb[members].sum(axis=0)
        centers[k] = s / max(np.linalg.norm(s), 1e-12)
    return centers


def refine_uncertain(
    prev: ClusterResult, child_emb: np.ndarray, selection: SampleSelection, p: Params, det: DetectorConfig
) -> ClusterResult:
    """Next-stage result: inherit labels through the quadtree, re-predict children of uncertain pixels."""
    h, w = prev.grid
    grid = (2 * h, 2 * w)
    assign = upsample_grid(prev.assign).reshape(-1).copy()
    mask = upsample_grid(prev.mask).reshape(-1).copy()
    rep_children = children_flat(selection.representatives, w)
    rep_labels = np.repeat(selection.rep_labels, 4)
    centers = _group_centers(child_emb, rep_children, rep_labels)

    refined = np.zeros(grid[0] * grid[1], dtype=bool)
    unc = children_flat(selection.uncertain, w)
    refined[unc] = True
    counts = np.bincount(assign, minlength=2)
    if unc.size:
        assign[unc] = np.argmax(child_emb[unc] @ centers.T, axis=1)
        counts = np.bincount(assign, minlength=2)
    ci, probs = classify_centers(centers, p, counts)
    mask[unc] = (assign[unc] != ci).astype(np.float64)
    z = confidence(child_emb, centers, assign, det.tau_conf, det.printed_confidence_sign)
    return ClusterResult(
        prev.stage + 1, grid, centers, assign.reshape(grid), ci, probs, z.reshape(grid), mask.reshape(grid),
        _p_corrupted(child_emb, centers, ci, det.tau_conf).reshape(grid), refined.reshape(grid),
    )


def inherit_stage(prev: ClusterResult, child_emb: np.ndarray, det: DetectorConfig) -> ClusterResult:
    """Pure quadtree inheritance, used when refinement is impossible."""
    h, w = prev.grid
    grid = (2 * h, 2 * w)
    assign = upsample_grid(prev.assign).reshape(-1)
    mask = upsample_grid(prev.mask)
    centers = prev.centers.copy()
    for k in (0, 1):
        s = child_emb[assign == k].sum(axis=0)
        if np.linalg.norm(s) > 1e-12:
            centers[k] = s / np.linalg.norm(s)
    z = confidence(child_emb, centers, assign, det.tau_conf, det.printed_confidence_sign)
    return ClusterResult(
        prev.stage + 1, grid, centers, assign.reshape(grid), prev.corrupted_index, prev.probs,
        z.reshape(grid), mask, _p_corrupted(child_emb, centers, prev.corrupted_index, det.tau_conf).reshape(grid),
        np.zeros(grid, dtype=bool),
    )


@dataclass
class Detection:
    masks: dict[int, np.ndarray]  # stage -> h x w, 1 = intact
    clusters: dict[int, ClusterResult]
    selections: dict[int, SampleSelection]
    degenerate: bool = False


def detect_from_embeddings(
    emb: dict[int, np.ndarray], grids: dict[int, tuple[int, int]], p: Params, det: DetectorConfig, seed: int = 0
) -> Detection:
    """Coarse-to-fine masks for one image from its per-stage embeddings (hw x d_e each)."""
    rng = np.random.default_rng(seed)
    for s in STAGES:
        if not np.all(np.isfinite(emb[s])):
            raise NonFiniteEmbeddingError(f"non-finite embedding at stage {s}")
    try:
        res = first_stage(emb[1], grids[1], p, det, rng)
    except DegenerateClusterError:
        logger.warning("degenerate embeddings; reporting an all-intact mask")
        masks = {s: np.ones(grids[s]) for s in STAGES}
        return Detection(masks, {}, {}, degenerate=True)
    clusters = {1: res}
    selections = {}
    for s in STAGES[1:]:
        prev = clusters[s - 1]
        sel = select_with_fallback(prev.z, prev.assign, det.theta_hi, det.theta_lo, det.rep_cap, rng)
        selections[s - 1] = sel
        try:
            clusters[s] = refine_uncertain(prev, emb[s], sel, p, det)
        except RefinementError as exc:
            logger.debug("stage %d keeps inherited labels: %s", s, exc)
            clusters[s] = inherit_stage(prev, emb[s], det)
    return Detection({s: c.mask for s, c in clusters.items()}, clusters, selections)


def embed(images, p: Params, model: ModelConfig) -> tuple[dict, dict[int, Tensor]]:
    feats = encode(images, p, model)
    return feats, project_all(feats, p)


def detect_masks(image, p: Params, model: ModelConfig, det: DetectorConfig, seed: int = 0) -> list[Detection]:
    """Detect multi-scale masks for a C x H x W image or an N x C x H x W batch."""
    feats, emb = embed(image, p, model)
    n = emb[1].shape[0]
    grids = {s: tuple(feats[s].shape[2:]) for s in STAGES}
    return [
        detect_from_embeddings({s: emb[s].data[i] for s in STAGES}, grids, p, det, seed) for i in range(n)
    ]
