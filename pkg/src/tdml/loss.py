"""Batch-all triplet loss with analytic gradient.

For a batch of embeddings x and labels y, the loss sums the hinge
``max(d(a,p) - d(a,n) + margin, 0)`` over every valid triplet: anchor a
and positive p share a label (a != p), negative n carries a different
label. ``d`` is the squared Euclidean distance. A triplet is "active"
when its hinge is strictly positive; triplets exactly at the margin
boundary contribute nothing to loss or gradient.

Normalization modes rescale the summed loss (and gradient) by 1, by the
number of valid triplets, or by the number of active triplets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NoValidTripletsError
from .numerics import as_matrix, pairwise_sq_dist

NORMALIZATIONS = ("sum", "mean_valid", "mean_active")


@dataclass(frozen=True)
class TripletBatchView:
    """A batch the loss consumes: (n, f) embeddings plus n labels."""

    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        emb = as_matrix(self.embeddings, "embeddings")
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.shape[0] != emb.shape[0]:
            raise InvalidArgumentError(
                f"labels must be 1-D of length {emb.shape[0]}, got shape {labels.shape}"
            )
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class LossResult:
    total_loss: float
    grad: np.ndarray  # d(total_loss)/d(embeddings), same shape as embeddings
    valid_triplets: int
    active_triplets: int

    @property
    def active_fraction(self) -> float:
        return self.active_triplets / self.valid_triplets if self.valid_triplets else 0.0


def triplet_loss_single(anchor, positive, negative, margin: float) -> float:
    """Hinge loss of one triplet."""
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    n = np.asarray(negative, dtype=np.float64)
    if not (a.shape == p.shape == n.shape) or a.ndim != 1:
        raise InvalidArgumentError(
            f"triplet vectors must share one 1-D shape, got {a.shape}, {p.shape}, {n.shape}"
        )
    if margin < 0:
        raise InvalidArgumentError(f"margin must be >= 0, got {margin}")
    d_ap = float(np.sum((a - p) ** 2))
    d_an = float(np.sum((a - n) ** 2))
    return max(d_ap - d_an + margin, 0.0)


def valid_triplet_count(labels) -> int:
    """Number of (a, p, n) index triples with label(a)=label(p), a != p, label(n) != label(a).

    For a batch of C classes with K records each this equals
    (K*C) * (K-1) * (K*C - K).
    """
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise InvalidArgumentError(f"labels must be 1-D, got shape {arr.shape}")
    n = arr.shape[0]
    _, counts = np.unique(arr, return_counts=True)
    return int(np.sum(counts * (counts - 1) * (n - counts)))


def batch_all_loss(batch: TripletBatchView, margin: float, normalization: str = "sum") -> LossResult:
    """Loss, gradient and triplet counts for one batch.

    Raises NoValidTripletsError when the batch has fewer than two distinct
    labels (no triplet can be formed).
    """
    if margin < 0:
        raise InvalidArgumentError(f"margin must be >= 0, got {margin}")
    if normalization not in NORMALIZATIONS:
        raise InvalidArgumentError(
            f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}"
        )
    x = batch.embeddings
    labels = batch.labels
    n = x.shape[0]
    if len(np.unique(labels)) < 2:
        raise NoValidTripletsError(
            f"batch has {len(np.unique(labels))} distinct label(s); need at least 2"
        )

    dist = pairwise_sq_dist(x)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same

    # hinge[a, p, m] = d(a,p) - d(a,m) + margin over the valid mask.
    hinge = dist[:, :, None] - dist[:, None, :] + margin
    valid = pos_mask[:, :, None] & neg_mask[:, None, :]
    active = valid & (hinge > 0.0)

    n_valid = int(valid.sum())
    n_active = int(active.sum())
    raw_total = float(hinge[active].sum())

    if normalization == "sum":
        scale = 1.0
    elif normalization == "mean_valid":
        # Two distinct labels with singleton classes can still yield zero
        # valid triplets (no positive pair); the loss is then zero.
        scale = 1.0 / n_valid if n_valid else 0.0
    else:
        scale = 1.0 / n_active if n_active else 0.0

    # Gradient of the raw sum. Per active triplet (a, p, m):
    #   g[a] += 2*(x[m] - x[p]);  g[p] += 2*(x[p] - x[a]);  g[m] += 2*(x[a] - x[m]).
    # Aggregate with the active-count matrices instead of looping triplets:
    # c_ap[a,p] = #active with that anchor/positive, c_an[a,m] likewise.
    c_ap = active.sum(axis=2).astype(np.float64)
    c_an = active.sum(axis=1).astype(np.float64)
    grad = (c_an - c_ap) @ x
    grad += c_ap.sum(axis=0)[:, None] * x - c_ap.T @ x
    grad += c_an.T @ x - c_an.sum(axis=0)[:, None] * x
    grad *= 2.0 * scale

    return LossResult(
        total_loss=raw_total * scale,
        grad=grad,
        valid_triplets=n_valid,
        active_triplets=n_active,
    )


def brute_force_batch_all(batch: TripletBatchView, margin: float) -> float:
    """Reference total via an explicit triple loop; sum normalization.

    Kept deliberately naive as an audit path for batch_all_loss.
    """
    if margin < 0:
        raise InvalidArgumentError(f"margin must be >= 0, got {margin}")
    x = batch.embeddings
    labels = batch.labels
    n = x.shape[0]
    if len(np.unique(labels)) < 2:
        raise NoValidTripletsError(
            f"batch has {len(np.unique(labels))} distinct label(s); need at least 2"
        )
    total = 0.0
    for a in range(n):
        for p in range(n):
            if a == p or labels[a] != labels[p]:
                continue
            for m in range(n):
                if labels[m] == labels[a]:
                    continue
                total += triplet_loss_single(x[a], x[p], x[m], margin)
    return total
