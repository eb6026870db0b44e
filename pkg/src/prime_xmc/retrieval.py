"""Exact inner-product top-k over a materialized prototype matrix.

Scores are computed one query at a time (a fixed-shape matrix-vector
product), so results are identical no matter how queries are sharded across
threads.  Ties are broken by ascending label index.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np


class RetrievalError(ValueError):
    """Invalid index construction or query arguments."""


@dataclass
class PrototypeIndex:
    matrix: np.ndarray          # (L, d) unit rows
    label_ids: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    @property
    def num_labels(self) -> int:
        return int(self.matrix.shape[0])


def build_index(matrix: np.ndarray, label_ids, meta: dict | None = None) -> PrototypeIndex:
    """Wrap a unit-row matrix for retrieval; validates norms to 1e-6."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise RetrievalError(f"index matrix must be non-empty 2-D, got shape {matrix.shape}")
    if len(label_ids) != matrix.shape[0]:
        raise RetrievalError("label_ids length does not match matrix rows")
    norms = np.linalg.norm(matrix, axis=1)
    worst = int(np.argmax(np.abs(norms - 1.0)))
    if abs(norms[worst] - 1.0) > 1e-6:
        raise RetrievalError(
            f"non-unit row beyond tolerance: row {worst} has norm {norms[worst]:.8f}"
        )
    return PrototypeIndex(matrix=matrix, label_ids=tuple(label_ids), meta=dict(meta or {}))


def _topk_row(index: PrototypeIndex, query_vec: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    scores = index.matrix @ query_vec
    order = np.lexsort((np.arange(scores.shape[0]), -scores))[:k]
    return order, scores[order]


def topk(index: PrototypeIndex, query_vec: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Ranked (label id, score) pairs: descending score, ties by label index."""
    if k < 1 or k > index.num_labels:
        raise RetrievalError(f"k must be in [1, {index.num_labels}], got {k}")
    query_vec = np.asarray(query_vec, dtype=np.float64)
    if query_vec.shape != (index.matrix.shape[1],):
        raise RetrievalError(
            f"query shape {query_vec.shape} does not match index dim {index.matrix.shape[1]}"
        )
    cols, scores = _topk_row(index, query_vec, k)
    return [(index.label_ids[c], float(s)) for c, s in zip(cols, scores)]


def topk_batch(
    index: PrototypeIndex,
    queries: np.ndarray,
    k: int,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Top-k for many queries: (n, k) label columns and scores.

    Each row is computed independently; thread count never changes results.
    """
    if k < 1 or k > index.num_labels:
        raise RetrievalError(f"k must be in [1, {index.num_labels}], got {k}")
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != index.matrix.shape[1]:
        raise RetrievalError(f"queries must be (n, {index.matrix.shape[1]}), got {queries.shape}")
    n = queries.shape[0]
    out_cols = np.empty((n, k), dtype=np.int64)
    out_scores = np.empty((n, k))

    def work(i: int) -> None:
        cols, scores = _topk_row(index, queries[i], k)
        out_cols[i] = cols
        out_scores[i] = scores

    if threads <= 1 or n <= 1:
        for i in range(n):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(n)))
    return out_cols, out_scores


def write_predictions(path, query_ids, label_ids, cols: np.ndarray, scores: np.ndarray) -> None:
    """One line per query: ``qid<TAB>label:score,...`` with 6-decimal scores."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qi, qid in enumerate(query_ids):
            parts = [f"{label_ids[c]}:{scores[qi, j]:.6f}" for j, c in enumerate(cols[qi])]
            fh.write(f"{qid}\t{','.join(parts)}\n")


def read_predictions(path, corpus) -> tuple[np.ndarray, np.ndarray]:
    """Parse a predictions file back to (cols, scores) aligned with ``corpus``.

    Ranking is the file order, so metrics computed from a re-parsed file match
    the in-process evaluation even though scores are rounded.
    """
    from .corpus import CorpusError

    col_of = {lid: i for i, lid in enumerate(corpus.label_ids)}
    by_qid: dict[str, tuple[list[int], list[float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusError(f"{path}: malformed prediction line {lineno}")
            qid, items = parts
            cols: list[int] = []
            scores: list[float] = []
            for item in items.split(","):
                lab, _, score = item.rpartition(":")
                if lab not in col_of:
                    raise CorpusError(f"{path}: unknown label id {lab!r} at line {lineno}")
                cols.append(col_of[lab])
                scores.append(float(score))
            by_qid[qid] = (cols, scores)
    n = corpus.num_queries
    if not by_qid:
        raise CorpusError(f"{path}: empty predictions file")
    width = len(next(iter(by_qid.values()))[0])
    out_cols = np.empty((n, width), dtype=np.int64)
    out_scores = np.empty((n, width))
    for qi, qid in enumerate(corpus.query_ids):
        if qid not in by_qid:
            raise CorpusError(f"{path}: no prediction row for query {qid!r}")
        cols, scores = by_qid[qid]
        if len(cols) != width:
            raise CorpusError(f"{path}: ragged prediction rows (query {qid!r})")
        out_cols[qi] = cols
        out_scores[qi] = scores
    return out_cols, out_scores


def export_prototypes(path, label_ids, matrix: np.ndarray) -> None:
    """Text export: ``id<TAB>hex`` with each row's f32 bytes hex-encoded."""
    mat32 = np.ascontiguousarray(matrix, dtype="<f4")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for lid, row in zip(label_ids, mat32):
            fh.write(f"{lid}\t{row.tobytes().hex()}\n")


def import_prototypes(path) -> tuple[tuple[str, ...], np.ndarray]:
    """Inverse of export_prototypes; returns float64 upcast of the f32 rows."""
    ids: list[str] = []
    rows: list[np.ndarray] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise RetrievalError(f"{path}: malformed export line {lineno}")
            ids.append(parts[0])
            rows.append(np.frombuffer(bytes.fromhex(parts[1]), dtype="<f4").astype(np.float64))
    if not rows:
        raise RetrievalError(f"{path}: empty prototype export")
    width = {r.shape[0] for r in rows}
    if len(width) != 1:
        raise RetrievalError(f"{path}: inconsistent row widths {sorted(width)}")
    return tuple(ids), np.vstack(rows)
