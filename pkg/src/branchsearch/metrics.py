"""Label-free evaluation metrics computed from classifier outputs.

Six quantities per snapshot: target prediction entropy, prediction diversity,
silhouette and Calinski-Harabasz scores of a K-Means refinement of the
predicted clustering, source cross-entropy and accuracy, and (retroactively,
once a run has finished) agreement with the prediction-mode pseudo-labels.

Nothing in this module accepts target labels; degenerate clusterings yield
NaN sentinels rather than silent zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import kernels
from .losses import cross_entropy

KMEANS_MAX_ITER = 100

METRIC_NAMES = (
    "entropy",
    "diversity",
    "silhouette",
    "calinski",
    "source_loss",
    "source_acc",
    "pseudo_label_acc",
)


@dataclass
class SnapshotMetrics:
    entropy: float
    diversity: float
    silhouette: float
    calinski: float
    source_loss: float
    source_acc: float
    pseudo_label_acc: float = math.nan

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def target_entropy(probs) -> float:
    """Mean per-row Shannon entropy, natural log, with 0*log(0) = 0."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[0] == 0:
        raise ValueError("entropy of an empty prediction set")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0.0, probs * np.log(probs), 0.0)
    return float(-terms.sum(axis=1).mean())


def diversity(probs, k) -> float:
    """Entropy of the mean predicted distribution, divided by class count."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[0] == 0:
        raise ValueError("diversity of an empty prediction set")
    if probs.shape[1] != k:
        raise ValueError(f"expected {k} columns, got {probs.shape[1]}")
    q = probs.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0.0, q * np.log(q), 0.0)
    return float(-terms.sum() / k)


def _respawn_empty(x, centroids, labels, counts):
    """Move each empty cluster's centroid onto the point farthest from its
    current assignment, one point per empty cluster."""
    d_own = ((x - centroids[labels]) ** 2).sum(axis=1)
    for j in np.flatnonzero(counts == 0):
        far = int(np.argmax(d_own))
        centroids[j] = x[far]
        d_own[far] = -1.0
    return centroids


def _lloyd(x, centroids):
    k = centroids.shape[0]
    labels = kernels.kmeans_assign(x, centroids)
    for _ in range(KMEANS_MAX_ITER):
        sums, counts = kernels.kmeans_accumulate(x, labels, k)
        occupied = counts > 0
        centroids = centroids.copy()
        centroids[occupied] = sums[occupied] / counts[occupied, None]
        if not occupied.all():
            centroids = _respawn_empty(x, centroids, labels, counts)
        new_labels = kernels.kmeans_assign(x, centroids)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels, centroids


def cluster_scores(features, probs):
    """Silhouette and Calinski-Harabasz of K-Means seeded at the centroids of
    the predicted classes. Returns (nan, nan) when fewer than two clusters
    survive, and calinski alone is nan when within-cluster scatter vanishes.
    """
    x = np.ascontiguousarray(features, dtype=np.float64)
    yhat = np.argmax(np.asarray(probs, dtype=np.float64), axis=1)
    present = np.unique(yhat)
    if present.shape[0] < 2:
        return math.nan, math.nan

    centroids = np.stack([x[yhat == c].mean(axis=0) for c in present])
    labels, centroids = _lloyd(x, centroids)

    k = centroids.shape[0]
    sums, counts = kernels.kmeans_accumulate(x, labels, k)
    occupied = np.flatnonzero(counts > 0)
    if occupied.shape[0] < 2:
        return math.nan, math.nan

    n = x.shape[0]
    dists = kernels.pairwise_sq_dists(x)
    sil = kernels.silhouette_mean(np.sqrt(dists), np.ascontiguousarray(labels), k)

    mean_all = x.mean(axis=0)
    means = sums[occupied] / counts[occupied, None]
    between = float((counts[occupied] * ((means - mean_all) ** 2).sum(axis=1)).sum())
    within = float(((x - sums[labels] / counts[labels, None]) ** 2).sum())
    k_eff = occupied.shape[0]
    if within <= 0.0 or n <= k_eff:
        return sil, math.nan
    calinski = (between / (k_eff - 1)) / (within / (n - k_eff))
    return sil, float(calinski)


def source_metrics(probs, y):
    """Mean cross-entropy and top-1 accuracy on labeled source rows."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if probs.shape[0] == 0:
        raise ValueError("source metrics of an empty batch")
    loss = cross_entropy(probs, y)
    acc = float((np.argmax(probs, axis=1) == y).mean())
    return loss, acc


def pseudo_label_accuracy(history) -> np.ndarray:
    """Per-epoch agreement with the mode-over-epochs pseudo-labels.

    ``history`` is (n_samples, n_epochs) of predicted classes; ties in the
    mode go to the class seen earliest.
    """
    history = np.ascontiguousarray(history, dtype=np.int64)
    if history.ndim != 2 or history.shape[1] < 1:
        raise ValueError("history must be (n_samples, n_epochs >= 1)")
    k = int(history.max()) + 1
    pseudo = kernels.mode_rows(history, k)
    return (history == pseudo[:, None]).mean(axis=0)


def compute_snapshot(target_probs, target_feats, source_probs, source_y) -> SnapshotMetrics:
    """All per-snapshot metrics except the retroactive pseudo-label one."""
    k = np.asarray(target_probs).shape[1]
    ent = target_entropy(target_probs)
    div = diversity(target_probs, k)
    sil, cal = cluster_scores(target_feats, target_probs)
    src_loss, src_acc = source_metrics(source_probs, source_y)
    return SnapshotMetrics(ent, div, sil, cal, src_loss, src_acc)
