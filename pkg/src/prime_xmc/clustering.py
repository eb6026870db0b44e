"""Balanced recursive 2-means over unit vectors.

Each split ranks members by the difference of cosine similarities to two
means and assigns the top half (ceil) to the first child, so cluster sizes
stay within one element of each other at every level.  Used both for the
free-vector bank assignment over label embeddings and for grouping queries
into batch-sized neighborhoods.
"""

from __future__ import annotations

import numpy as np

_SPLIT_ITERS = 10


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms < 1e-12, 1.0, norms)
    return x / safe

def _renorm(v: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < 1e-12:
        return fallback
    return v / n


def balanced_split(emb: np.ndarray, idx: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split index set ``idx`` into ceil/floor halves by 2-means ranking."""
    n = idx.shape[0]
    if n < 2:
        raise ValueError("cannot split a cluster with fewer than 2 members")
    seeds = rng.choice(n, size=2, replace=False)
    m1 = emb[idx[seeds[0]]]
    m2 = emb[idx[seeds[1]]]
    n_left = (n + 1) // 2
    prev: np.ndarray | None = None
    rows = emb[idx]
    for _ in range(_SPLIT_ITERS):
        delta = rows @ m1 - rows @ m2
        order = np.lexsort((idx, -delta))
        left = order[:n_left]
        right = order[n_left:]
        if prev is not None and np.array_equal(left, prev):
            break
        prev = left
        m1 = _renorm(rows[left].mean(axis=0), m1)
        m2 = _renorm(rows[right].mean(axis=0), m2)
    return np.sort(idx[prev]), np.sort(idx[np.setdiff1d(np.arange(n), prev, assume_unique=True)])


def recursive_clusters(embeddings: np.ndarray, num_clusters: int, seed: int) -> list[np.ndarray]:
    """Partition row indices into ``num_clusters`` balanced groups.

    Splits proceed level by level; when the target is not a power of two the
    largest remaining clusters are split first.  Deterministic in ``seed``.
    """
    n = embeddings.shape[0]
    if num_clusters < 1:
        raise ValueError(f"num_clusters must be >= 1, got {num_clusters}")
    if num_clusters > n:
        raise ValueError(f"num_clusters {num_clusters} exceeds population {n}")
    emb = _unit_rows(np.asarray(embeddings, dtype=np.float64))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x2C]))
    clusters: list[np.ndarray] = [np.arange(n, dtype=np.int64)]
    while len(clusters) < num_clusters:
        need = num_clusters - len(clusters)
        # split the largest clusters first; ties broken by smallest member
        order = sorted(range(len(clusters)), key=lambda j: (-len(clusters[j]), int(clusters[j][0])))
        splittable = [j for j in order if len(clusters[j]) >= 2]
        chosen = set(splittable[: min(need, len(splittable))])
        nxt: list[np.ndarray] = []
        for j in range(len(clusters)):
            if j in chosen:
                left, right = balanced_split(emb, clusters[j], rng)
                nxt.append(left)
                nxt.append(right)
            else:
                nxt.append(clusters[j])
        clusters = nxt
    return clusters


def cluster_labels(embeddings: np.ndarray, num_clusters: int, seed: int) -> np.ndarray:
    """Assign each embedding row to one of ``num_clusters`` balanced clusters."""
    clusters = recursive_clusters(embeddings, num_clusters, seed)
    assignment = np.empty(embeddings.shape[0], dtype=np.int64)
    for cid, members in enumerate(clusters):
        assignment[members] = cid
    return assignment
