"""Batch construction: clustered query batches, positive sampling, label pools.

Queries are grouped by balanced recursive 2-means over their current
embeddings so each batch holds semantically close queries; the other queries'
positives then act as informative in-batch negatives.  Each query contributes
a propensity-weighted sample of its positives; the batch label pool is the
deduplicated union of those samples, so the number of labels encoded per step
is bounded by batch_size * positives_per_query regardless of corpus size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import recursive_clusters
from .corpus import Corpus, PropensityTable


@dataclass
class BatchPlan:
    """Epoch-indexed batch layout over clustered queries."""

    clusters: list[np.ndarray]
    batch_size: int
    seed: int
    refresh_period: int

    def epoch_batches(self, epoch: int) -> list[np.ndarray]:
        """Deterministic batches for one epoch: shuffled clusters, contiguous chunks."""
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xE9, epoch]))
        order = rng.permutation(len(self.clusters))
        batches: list[np.ndarray] = []
        for ci in order:
            members = self.clusters[ci]
            members = members[rng.permutation(len(members))]
            for start in range(0, len(members), self.batch_size):
                batches.append(members[start : start + self.batch_size])
        return batches


def build_batch_plan(
    query_embeddings: np.ndarray,
    batch_size: int,
    seed: int,
    refresh_period: int = 10,
) -> BatchPlan:
    """Cluster queries into groups of at most ``batch_size``.

    The number of clusters is the smallest power of two that brings every
    balanced cluster under the batch size.
    """
    q = query_embeddings.shape[0]
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    if q < batch_size:
        raise ValueError(f"need at least batch_size={batch_size} queries, got {q}")
    levels = int(np.ceil(np.log2(q / batch_size))) if q > batch_size else 0
    num_clusters = 2 ** levels
    clusters = recursive_clusters(query_embeddings, num_clusters, seed)
    return BatchPlan(clusters=clusters, batch_size=batch_size, seed=seed, refresh_period=refresh_period)


def sample_positives(
    query: int,
    corpus: Corpus,
    propensities: PropensityTable,
    num_positives: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw up to ``num_positives`` labels from P_i without replacement.

    Draw probabilities are proportional to inverse propensity (rare labels
    oversampled), renormalized after each draw.  Queries with fewer positives
    than requested return them all, padded with -1 under a False mask.
    """
    pos = corpus.positives(query)
    labels = np.full(num_positives, -1, dtype=np.int64)
    mask = np.zeros(num_positives, dtype=bool)
    n = len(pos)
    if n == 0:
        return labels, mask
    if n <= num_positives:
        labels[:n] = pos
        mask[:n] = True
        return labels, mask
    weights = propensities.gamma[pos].astype(np.float64).copy()
    remaining = list(range(n))
    for slot in range(num_positives):
        w = weights[remaining]
        probs = w / w.sum()
        j = int(rng.choice(len(remaining), p=probs))
        labels[slot] = pos[remaining[j]]
        mask[slot] = True
        remaining.pop(j)
    return labels, mask


@dataclass
class TripletBatch:
    """Per-step batch: queries, sampled positives, shared label pool, masks."""

    query_indices: np.ndarray   # (B,)
    pos_labels: np.ndarray      # (B, P) global label columns, -1 where invalid
    pos_mask: np.ndarray        # (B, P)
    pos_cols: np.ndarray        # (B, P) columns into the pool, 0 where invalid
    pool: np.ndarray            # (K,) distinct labels, first-appearance order
    membership: np.ndarray      # (B, K) pool label relevant to query (full truth)
    negative_mask: np.ndarray   # (B, K) complement of membership

    @property
    def pool_size(self) -> int:
        return int(self.pool.shape[0])


def assemble_triplet_batch(
    batch_queries: np.ndarray,
    pos_labels: np.ndarray,
    pos_mask: np.ndarray,
    corpus: Corpus,
) -> TripletBatch:
    """Build the shared pool and masks for one batch.

    The negative mask excludes every ground-truth positive of each query, not
    just the sampled ones, so an unsampled positive can never be pushed away
    as a negative.
    """
    b, p = pos_labels.shape
    col_of: dict[int, int] = {}
    pool: list[int] = []
    for i in range(b):
        for j in range(p):
            if not pos_mask[i, j]:
                continue
            lab = int(pos_labels[i, j])
            if lab not in col_of:
                col_of[lab] = len(pool)
                pool.append(lab)
    pool_arr = np.asarray(pool, dtype=np.int64)
    k = len(pool)
    pos_cols = np.zeros((b, p), dtype=np.int64)
    for i in range(b):
        for j in range(p):
            if pos_mask[i, j]:
                pos_cols[i, j] = col_of[int(pos_labels[i, j])]
    membership = np.zeros((b, k), dtype=bool)
    for i, qi in enumerate(batch_queries):
        if k:
            membership[i] = np.isin(pool_arr, corpus.positives(int(qi)), assume_unique=False)
    return TripletBatch(
        query_indices=np.asarray(batch_queries, dtype=np.int64),
        pos_labels=pos_labels,
        pos_mask=pos_mask,
        pos_cols=pos_cols,
        pool=pool_arr,
        membership=membership,
        negative_mask=~membership,
    )
