"""Synthetic corpora with planted cluster structure, for experiments and tests."""

from __future__ import annotations

import numpy as np

from .corpus import Corpus


def _build(query_ids, query_texts, label_ids, label_texts, positives) -> Corpus:
    indptr = [0]
    indices: list[int] = []
    for pos in positives:
        indices.extend(pos)
        indptr.append(len(indices))
    return Corpus(
        query_ids=tuple(query_ids),
        query_texts=tuple(query_texts),
        label_ids=tuple(label_ids),
        label_texts=tuple(label_texts),
        indptr=np.asarray(indptr, dtype=np.int64),
        indices=np.asarray(indices, dtype=np.int64),
    )


def planted_corpus(
    num_clusters: int = 3,
    queries_per_cluster: int = 10,
    labels_per_cluster: int = 3,
    seed: int = 7,
) -> Corpus:
    """Fully separable corpus: clusters with disjoint vocabularies.

    Every query of a cluster is relevant to all of the cluster's labels, so a
    correct model reaches P@1 = 1 and R@(labels_per_cluster...) = 1.  Labels
    carry the full cluster core plus one tag word; queries drop one core word
    and add one tag.  Within-cluster text similarities therefore start high
    but strictly below 1, and cross-cluster similarities start near 0:
    every triplet view is margin-separated from the first step, and the
    alignment hinges can close because prototypes have headroom above the
    query/label similarities.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A]))
    label_ids: list[str] = []
    label_texts: list[str] = []
    query_ids: list[str] = []
    query_texts: list[str] = []
    positives: list[list[int]] = []
    for c in range(num_clusters):
        core = [f"c{c}w{j}" for j in range(5)]
        tags = [f"c{c}tag{t}" for t in range(labels_per_cluster)]
        for t in range(labels_per_cluster):
            label_ids.append(f"l{c}_{t}")
            label_texts.append(" ".join(core + [tags[t]]))
        cluster_cols = list(range(c * labels_per_cluster, (c + 1) * labels_per_cluster))
        for q in range(queries_per_cluster):
            drop = int(rng.integers(len(core)))
            words = [w for j, w in enumerate(core) if j != drop]
            words.append(tags[q % labels_per_cluster])
            order = rng.permutation(len(words))
            query_ids.append(f"q{c}_{q}")
            query_texts.append(" ".join(words[i] for i in order))
            positives.append(list(cluster_cols))
    return _build(query_ids, query_texts, label_ids, label_texts, positives)


def ablation_corpus(
    num_queries: int = 2000,
    num_labels: int = 500,
    cluster_size: int = 5,
    noise_vocab: int = 40,
    missing_rate: float = 0.05,
    seed: int = 13,
) -> tuple[Corpus, Corpus]:
    """Clustered corpus with a fraction of true pairs hidden from training.

    Returns (train_corpus, full_corpus): identical texts, but the train
    corpus drops ``missing_rate`` of the (query, label) pairs uniformly at
    random (keeping at least one positive per query).  Evaluating against the
    full corpus measures robustness to missing labels.

    Clusters are separable by construction (disjoint core vocabularies), so
    hidden pairs are the dominant source of high-similarity negatives during
    training; shared common words give cross-cluster similarities a nonzero
    floor so corruption of the query geometry is visible in P@1.
    """
    if num_labels % cluster_size:
        raise ValueError("num_labels must be a multiple of cluster_size")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAB1]))
    num_clusters = num_labels // cluster_size
    cluster_vocab = [[f"c{c}w{j}" for j in range(6)] for c in range(num_clusters)]
    common = [f"common{j}" for j in range(noise_vocab)]

    label_ids = []
    label_texts = []
    for c in range(num_clusters):
        for t in range(cluster_size):
            words = list(cluster_vocab[c])
            words.append(f"c{c}tag{t}")
            label_ids.append(f"l{c}_{t}")
            label_texts.append(" ".join(words))

    query_ids = []
    query_texts = []
    full_pos: list[list[int]] = []
    for q in range(num_queries):
        c = q % num_clusters
        n_words = int(rng.integers(4, 6))
        words = [cluster_vocab[c][w] for w in rng.choice(6, size=n_words, replace=False)]
        if noise_vocab:
            words.append(common[int(rng.integers(noise_vocab))])
        order = rng.permutation(len(words))
        query_ids.append(f"q{q}")
        query_texts.append(" ".join(words[i] for i in order))
        full_pos.append(list(range(c * cluster_size, (c + 1) * cluster_size)))

    train_pos = [list(p) for p in full_pos]
    pairs = [(qi, j) for qi, pos in enumerate(full_pos) for j in range(len(pos))]
    n_drop = int(round(missing_rate * len(pairs)))
    for idx in rng.permutation(len(pairs)):
        if n_drop == 0:
            break
        qi, j = pairs[idx]
        lab = full_pos[qi][j]
        if lab in train_pos[qi] and len(train_pos[qi]) > 1:
            train_pos[qi].remove(lab)
            n_drop -= 1

    full = _build(query_ids, query_texts, label_ids, label_texts, full_pos)
    train = _build(query_ids, query_texts, label_ids, label_texts, train_pos)
    return train, full


def bigpool_corpus(num_labels: int = 10_000, num_queries: int = 320, seed: int = 5) -> Corpus:
    """Many labels, few queries: exercises the per-step label pool bound."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB16]))
    label_ids = [f"l{j}" for j in range(num_labels)]
    label_texts = [f"item{j} tag{j % 97} group{j % 13}" for j in range(num_labels)]
    query_ids = []
    query_texts = []
    positives = []
    for q in range(num_queries):
        n_pos = int(rng.integers(2, 6))
        cols = sorted(int(x) for x in rng.choice(num_labels, size=n_pos, replace=False))
        query_ids.append(f"q{q}")
        query_texts.append(" ".join(f"item{c}" for c in cols))
        positives.append(cols)
    return _build(query_ids, query_texts, label_ids, label_texts, positives)
