"""Recommendation loss, InfoNCE contrastive terms and their combination."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import ConfigError
from .swing import SimilarityGraph


@dataclass
class LossConfig:
    tau: float = 0.2
    w1: float = 0.1  # item-item weight
    w2: float = 0.1  # user-user weight
    pos_class_weight: float = 1.0
    # None -> #pos / #neg of the training split
    neg_class_weight: float | None = None
    K: int = 8
    normalize: bool = False
    # False disables contrastive sampling entirely (the BCE-only arm)
    contrastive: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.w1 < 0 or self.w2 < 0 or self.pos_class_weight <= 0 or (
                self.neg_class_weight is not None and self.neg_class_weight <= 0):
            raise ConfigError("loss weights must be nonnegative and class weights positive")


def weighted_bce(logits: Tensor, labels: np.ndarray, pos_weight: float = 1.0, neg_weight: float = 1.0) -> Tensor:
    """Mean of ``-w(y) * log p(y | logit)``, written as softplus of the signed logit."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("weighted_bce on an empty batch")
    logits = ad.as_tensor(logits)
    if logits.shape != labels.shape:
        raise ad.ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    # -log sigmoid(z) = softplus(-z);  -log(1 - sigmoid(z)) = softplus(z)
    sign = 1.0 - 2.0 * labels
    weights = np.where(labels == 1, pos_weight, neg_weight)
    return ad.mean(ad.mul(ad.softplus(ad.mul(logits, sign)), weights))


@dataclass
class ContrastiveBatch:
    """Sampled anchors for one side, as entity indices.

    ``negatives`` has shape ``[len(anchors), K]``.
    """

    side: str
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    skipped: int = 0

    def __len__(self):
        return len(self.anchors)


@dataclass
class NeighborIndex:
    """A similarity graph translated into the encoded entity index space."""

    side: str
    lists: list[np.ndarray]
    excluded: np.ndarray = field(repr=False)  # bool [n, n]: self or neighbor

    @classmethod
    def from_graph(cls, sims: SimilarityGraph, ids: list[str]) -> "NeighborIndex":
        pos = {k: i for i, k in enumerate(ids)}
        n = len(ids)
        lists = []
        excluded = np.eye(n, dtype=bool)
        for i, key in enumerate(ids):
            nb = np.array([pos[m] for m, _ in sims.neighbors.get(key, []) if m in pos], dtype=np.int64)
            lists.append(nb)
            excluded[i, nb] = True
        return cls(sims.side, lists, excluded)


def sample_contrastive(side: str, entities, index: NeighborIndex, K: int,
                       rng: np.random.Generator) -> ContrastiveBatch:
    """One positive from each anchor's neighbor list and ``K`` corpus negatives.

    The corpus is every entity in ``index``; negatives exclude the anchor and
    its whole neighbor list. Anchors without neighbors are skipped.
    """
    if index.side != side:
        raise ValueError(f"similarity graph is for side {index.side!r}, not {side!r}")
    entities = np.unique(np.asarray(entities, dtype=np.int64))
    counts = np.array([len(index.lists[e]) for e in entities], dtype=np.int64)
    anchors = entities[counts > 0]
    skipped = int(len(entities) - len(anchors))
    n = index.excluded.shape[0]
    if len(anchors) == 0:
        return ContrastiveBatch(side, anchors, anchors.copy(), np.zeros((0, K), dtype=np.int64), skipped)
    worst = int(counts.max())
    if n < K + worst + 1:
        raise ConfigError(f"corpus of {n} too small for K={K} negatives with {worst} neighbors")
    pick = (rng.random(len(anchors)) * counts[counts > 0]).astype(np.int64)
    positives = np.array([index.lists[a][p] for a, p in zip(anchors, pick)], dtype=np.int64)
    # uniform K-subset of the allowed entities: smallest K of iid uniform keys
    keys = rng.random((len(anchors), n))
    keys[index.excluded[anchors]] = np.inf
    negatives = np.argpartition(keys, K - 1, axis=1)[:, :K]
    negatives = np.take_along_axis(negatives, np.argsort(np.take_along_axis(keys, negatives, 1), axis=1), 1)
    return ContrastiveBatch(side, anchors, positives, negatives, skipped)


def infonce(anchors: Tensor, candidates: Tensor, tau: float, normalize: bool = False) -> Tensor:
    """Mean InfoNCE over anchors.

    ``anchors`` is ``[A, d]``; ``candidates`` is ``[A * (K + 1), d]`` holding,
    for each anchor in turn, its positive followed by its ``K`` negatives.
    """
    anchors, candidates = ad.as_tensor(anchors), ad.as_tensor(candidates)
    n_anchor = anchors.shape[0]
    if n_anchor == 0:
        raise ValueError("infonce needs at least one anchor")
    width = candidates.shape[0] // n_anchor
    if width * n_anchor != candidates.shape[0] or width < 2:
        raise ad.ShapeError(f"{candidates.shape[0]} candidates do not split over {n_anchor} anchors")
    if normalize:
        anchors, candidates = ad.normalize_rows(anchors), ad.normalize_rows(candidates)
    repeated = ad.gather_rows(anchors, np.repeat(np.arange(n_anchor), width))
    logits = ad.scale(ad.reshape(ad.sum(ad.mul(repeated, candidates), axis=1), (n_anchor, width)), 1.0 / tau)
    first = np.zeros((n_anchor, width))
    first[:, 0] = 1.0
    positive = ad.sum(ad.mul(logits, first), axis=1)
    return ad.mean(ad.sub(ad.logsumexp(logits, axis=1), positive))


def infonce_from_logits(logits: np.ndarray) -> float:
    """Reference value for a single anchor: column 0 is the positive logit."""
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max()
    return float(m + math.log(np.exp(logits - m).sum()) - logits[0])


@dataclass
class LossBreakdown:
    L_rec: float
    L_ii: float
    L_uu: float
    L_total: float
    n_item_anchors: int = 0
    n_user_anchors: int = 0


def composite_loss(L_rec: Tensor, L_ii: Tensor | None, L_uu: Tensor | None,
                   cfg: LossConfig) -> tuple[Tensor, LossBreakdown]:
    """``L_rec + w1 * L_ii + w2 * L_uu``; a missing or zero-weighted term adds nothing to the graph."""
    total = L_rec
    value = L_rec.item()
    for term, w in ((L_ii, cfg.w1), (L_uu, cfg.w2)):
        if term is None or w == 0:
            continue
        total = ad.add(total, ad.scale(term, w))
        value = total.item()
    ii = L_ii.item() if L_ii is not None else 0.0
    uu = L_uu.item() if L_uu is not None else 0.0
    return total, LossBreakdown(L_rec.item(), ii, uu, value)
