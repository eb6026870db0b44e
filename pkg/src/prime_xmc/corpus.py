"""Corpus data model: file ingestion, canonical serialization, propensity scores.

Query files hold one record per line, ``id<TAB>label,label,...<TAB>text``;
label files hold ``id<TAB>text``.  Lines starting with ``#`` are ignored.
Relevance is stored as a CSR structure over integer label columns, in the
order labels first appear on each query line (duplicates dropped).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class CorpusError(ValueError):
    """Malformed corpus input or a violated data contract at ingest time."""


@dataclass(frozen=True, eq=False)
class Corpus:
    """Immutable query/label collection with sparse relevance in CSR form."""

    query_ids: tuple[str, ...]
    query_texts: tuple[str, ...]
    label_ids: tuple[str, ...]
    label_texts: tuple[str, ...]
    indptr: np.ndarray
    indices: np.ndarray

    @property
    def num_queries(self) -> int:
        return len(self.query_ids)

    @property
    def num_labels(self) -> int:
        return len(self.label_ids)

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def positives(self, i: int) -> np.ndarray:
        """Label columns relevant to query ``i``, in stored (line) order."""
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def label_frequencies(self) -> np.ndarray:
        """Number of training queries each label appears in (length L)."""
        return np.bincount(self.indices, minlength=self.num_labels).astype(np.int64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.query_ids == other.query_ids
            and self.query_texts == other.query_texts
            and self.label_ids == other.label_ids
            and self.label_texts == other.label_texts
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )


def _iter_records(path: Path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def ingest(query_file: str | Path, label_file: str | Path, allow_empty: bool = False) -> Corpus:
    """Parse query and label files into a Corpus.

    Raises CorpusError on malformed lines, duplicate ids, references to
    unknown labels, or (unless ``allow_empty``) queries with no positives.
    """
    query_file = Path(query_file)
    label_file = Path(label_file)

    label_ids: list[str] = []
    label_texts: list[str] = []
    col_of: dict[str, int] = {}
    for lineno, line in _iter_records(label_file):
        parts = line.split("\t", 1)
        if len(parts) == 1:
            raise CorpusError(f"{label_file}: malformed label line {lineno}: missing text field")
        lid, text = parts
        if not lid:
            raise CorpusError(f"{label_file}: malformed label line {lineno}: empty id")
        if lid in col_of:
            raise CorpusError(f"{label_file}: duplicate label id {lid!r} at line {lineno}")
        col_of[lid] = len(label_ids)
        label_ids.append(lid)
        label_texts.append(text)

    query_ids: list[str] = []
    query_texts: list[str] = []
    seen_q: set[str] = set()
    indptr = [0]
    indices: list[int] = []
    for lineno, line in _iter_records(query_file):
        parts = line.split("\t")
        if len(parts) < 2:
            raise CorpusError(f"{query_file}: malformed query line {lineno}: expected id<TAB>labels<TAB>text")
        qid = parts[0]
        label_field = parts[1]
        text = "\t".join(parts[2:]) if len(parts) > 2 else ""
        if not qid:
            raise CorpusError(f"{query_file}: malformed query line {lineno}: empty id")
        if qid in seen_q:
            raise CorpusError(f"{query_file}: duplicate query id {qid!r} at line {lineno}")
        seen_q.add(qid)

        cols: list[int] = []
        seen_cols: set[int] = set()
        if label_field:
            for ref in label_field.split(","):
                if not ref:
                    raise CorpusError(f"{query_file}: malformed query line {lineno}: empty label id")
                col = col_of.get(ref)
                if col is None:
                    raise CorpusError(f"{query_file}: unknown label id {ref!r} at line {lineno}")
                if col not in seen_cols:
                    seen_cols.add(col)
                    cols.append(col)
        if not cols and not allow_empty:
            raise CorpusError(f"{query_file}: empty positive set at line {lineno}")

        query_ids.append(qid)
        query_texts.append(text)
        indices.extend(cols)
        indptr.append(len(indices))

    return Corpus(
        query_ids=tuple(query_ids),
        query_texts=tuple(query_texts),
        label_ids=tuple(label_ids),
        label_texts=tuple(label_texts),
        indptr=np.asarray(indptr, dtype=np.int64),
        indices=np.asarray(indices, dtype=np.int64),
    )


def serialize_corpus(corpus: Corpus, query_file: str | Path, label_file: str | Path) -> None:
    """Write the canonical corpus form; re-ingesting reproduces ``corpus``."""
    with open(label_file, "w", encoding="utf-8", newline="\n") as fh:
        for lid, text in zip(corpus.label_ids, corpus.label_texts):
            fh.write(f"{lid}\t{text}\n")
    with open(query_file, "w", encoding="utf-8", newline="\n") as fh:
        for i, (qid, text) in enumerate(zip(corpus.query_ids, corpus.query_texts)):
            refs = ",".join(corpus.label_ids[c] for c in corpus.positives(i))
            fh.write(f"{qid}\t{refs}\t{text}\n")


@dataclass(frozen=True)
class PropensityTable:
    """Per-label propensities p, inverse weights gamma = 1/p, and fit constants."""

    p: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray
    a_const: float
    b_const: float


def compute_propensities(corpus: Corpus, a: float = 0.55, b: float = 1.5) -> PropensityTable:
    """Fit per-label propensities from training frequencies.

    p_l = 1 / (1 + C * exp(-a * ln(n_l + b))) with C = (ln Q - 1) * (b + 1)^a.
    """
    if a <= 0:
        raise ValueError(f"propensity constant a must be positive, got {a}")
    if b < 0:
        raise ValueError(f"propensity constant b must be non-negative, got {b}")
    q = corpus.num_queries
    if q < 3:
        raise CorpusError(f"corpus too small for propensity fit: {q} queries (need >= 3)")
    n = corpus.label_frequencies().astype(np.float64)
    if np.any(n + b <= 0):
        raise CorpusError("propensity undefined: unobserved label with b = 0")
    c = (math.log(q) - 1.0) * (b + 1.0) ** a
    p = 1.0 / (1.0 + c * np.exp(-a * np.log(n + b)))
    if not np.all((p > 0) & (p <= 1.0)):
        raise CorpusError("propensity fit produced values outside (0, 1]")
    gamma = 1.0 / p
    return PropensityTable(p=p, gamma=gamma, counts=n.astype(np.int64), a_const=a, b_const=b)


def save_propensities(table: PropensityTable, corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# a={float(table.a_const)!r} b={float(table.b_const)!r}\n")
        fh.write("# label_id\tcount\tp\tgamma\n")
        for lid, n, p, g in zip(corpus.label_ids, table.counts, table.p, table.gamma):
            # repr of a Python float round-trips bit-exactly; numpy scalar repr does not parse.
            fh.write(f"{lid}\t{int(n)}\t{float(p)!r}\t{float(g)!r}\n")


def load_propensities(path: str | Path, corpus: Corpus) -> PropensityTable:
    """Read a propensity table written by save_propensities, aligned to ``corpus``."""
    a = b = None
    rows: dict[str, tuple[int, float, float]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "a=" in line and "b=" in line:
                    fields = dict(tok.split("=", 1) for tok in line[1:].split() if "=" in tok)
                    a = float(fields["a"])
                    b = float(fields["b"])
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise CorpusError(f"{path}: malformed propensity line {lineno}")
            rows[parts[0]] = (int(parts[1]), float(parts[2]), float(parts[3]))
    if a is None or b is None:
        raise CorpusError(f"{path}: missing propensity constants header")
    p = np.empty(corpus.num_labels)
    gamma = np.empty(corpus.num_labels)
    counts = np.empty(corpus.num_labels, dtype=np.int64)
    for col, lid in enumerate(corpus.label_ids):
        if lid not in rows:
            raise CorpusError(f"{path}: no propensity row for label {lid!r}")
        counts[col], p[col], gamma[col] = rows[lid]
    return PropensityTable(p=p, gamma=gamma, counts=counts, a_const=a, b_const=b)
