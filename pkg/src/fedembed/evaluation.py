"""Retrieval evaluation: distance matrices, CMC rank-k, mAP, accuracy.

Distance ties are broken by stable gallery index so results are identical
across runs. Average precision is the non-interpolated variant; per-query
precision values are combined with exactly-rounded summation (math.fsum) so
the reported numbers do not depend on accumulation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

DEFAULT_RANKS = (1, 5, 10)


@dataclass
class RetrievalResult:
    rank_accuracies: dict[int, float]
    mean_ap: float
    average_precisions: list[float] = field(default_factory=list)

    @property
    def rank1(self) -> float:
        return self.rank_accuracies[1]


def extract_embeddings(net, features: np.ndarray) -> np.ndarray:
    """Eval-mode embeddings, one row per input row.

    Rows are pushed through the network one at a time: batched matrix products
    can differ from single-row products in the last bits, and downstream
    comparisons rely on per-sample reproducibility.
    """
    features = np.asarray(features, dtype=np.float64)
    if len(features) == 0:
        return np.zeros((0, net.output_dim))
    return np.concatenate([net.forward(features[i:i + 1]) for i in range(len(features))])


def l2_distance_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Euclidean distances, entry (q, g) = ||queries[q] - gallery[g]||."""
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if queries.ndim != 2 or gallery.ndim != 2 or queries.shape[1] != gallery.shape[1]:
        raise InputError(
            f"incompatible shapes {queries.shape} vs {gallery.shape}")
    diff = queries[:, None, :] - gallery[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def _check_ids(dists, query_ids, gallery_ids):
    dists = np.asarray(dists, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if dists.shape != (len(query_ids), len(gallery_ids)):
        raise InputError(f"distance matrix shape {dists.shape} does not match "
                         f"{len(query_ids)} queries x {len(gallery_ids)} gallery items")
    missing = set(query_ids.tolist()) - set(gallery_ids.tolist())
    if missing:
        raise InputError(f"query ids absent from gallery: {sorted(missing)}")
    return dists, query_ids, gallery_ids


def cmc(dists, query_ids, gallery_ids, ks=DEFAULT_RANKS) -> dict[int, float]:
    """Fraction of queries whose nearest k gallery rows contain a matching id."""
    dists, query_ids, gallery_ids = _check_ids(dists, query_ids, gallery_ids)
    first_hit = np.empty(len(query_ids), dtype=np.int64)
    for qi in range(len(query_ids)):
        order = np.argsort(dists[qi], kind="stable")
        hits = np.flatnonzero(gallery_ids[order] == query_ids[qi])
        first_hit[qi] = hits[0]
    return {int(k): float((first_hit < k).sum() / len(query_ids)) for k in ks}


def mean_average_precision(dists, query_ids, gallery_ids) -> tuple[float, list[float]]:
    """Non-interpolated mAP and the per-query average precisions."""
    dists, query_ids, gallery_ids = _check_ids(dists, query_ids, gallery_ids)
    aps = []
    for qi in range(len(query_ids)):
        order = np.argsort(dists[qi], kind="stable")
        relevant = gallery_ids[order] == query_ids[qi]
        positions = np.flatnonzero(relevant) + 1       # 1-indexed ranks
        precisions = [(i + 1) / pos for i, pos in enumerate(positions)]
        aps.append(math.fsum(precisions) / len(positions))
    return math.fsum(aps) / len(aps), aps


def evaluate_retrieval(net, query_ds, gallery_ds, ks=DEFAULT_RANKS) -> RetrievalResult:
    """End-to-end retrieval scoring of an embedding model on a query/gallery split."""
    q = extract_embeddings(net, query_ds.features)
    g = extract_embeddings(net, gallery_ds.features)
    dists = l2_distance_matrix(q, g)
    ranks = cmc(dists, query_ds.labels, gallery_ds.labels, ks)
    m, aps = mean_average_precision(dists, query_ds.labels, gallery_ds.labels)
    return RetrievalResult(ranks, m, aps)


def classification_accuracy(logits, labels) -> float:
    """Argmax match fraction; ties resolve to the lowest class index."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InputError(f"logits {logits.shape} and labels {labels.shape} disagree")
    return float((logits.argmax(axis=1) == labels).sum() / len(labels))
