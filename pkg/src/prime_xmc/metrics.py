"""Rank-based evaluation: P@k, propensity-scored P@k, R@k.

All metrics consume ranked label columns, never raw scores, so any positive
monotone rescaling of scores leaves them unchanged.  Queries with no true
labels are skipped and tallied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, PropensityTable


class MetricsError(ValueError):
    """Invalid metric arguments (k beyond prediction width, bad shapes)."""


@dataclass
class EvalResult:
    """Metric values keyed by k, plus the evaluated/skipped query tally."""

    p_at: dict[int, float] = field(default_factory=dict)
    psp_at: dict[int, float] = field(default_factory=dict)
    r_at: dict[int, float] = field(default_factory=dict)
    sp_at: dict[int, float] = field(default_factory=dict)
    evaluated: int = 0
    skipped: int = 0

    def to_json(self) -> str:
        payload = {
            "precision": {str(k): v for k, v in sorted(self.p_at.items())},
            "psp": {str(k): v for k, v in sorted(self.psp_at.items())},
            "recall": {str(k): v for k, v in sorted(self.r_at.items())},
            "sp": {str(k): v for k, v in sorted(self.sp_at.items())},
            "evaluated": self.evaluated,
            "skipped": self.skipped,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_table(self) -> str:
        ks = sorted(self.p_at)
        rows = [("metric", *[f"@{k}" for k in ks])]
        rows.append(("P", *[f"{self.p_at[k]:.4f}" for k in ks]))
        rows.append(("PSP", *[f"{self.psp_at[k]:.4f}" for k in ks]))
        rows.append(("R", *[f"{self.r_at[k]:.4f}" for k in ks]))
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows]
        lines.append(f"evaluated={self.evaluated} skipped={self.skipped}")
        return "\n".join(lines)


def _truth_sets(corpus: Corpus) -> list[set[int]]:
    return [set(int(x) for x in corpus.positives(i)) for i in range(corpus.num_queries)]


def _check_k(predicted: np.ndarray, k: int) -> None:
    if k < 1:
        raise MetricsError(f"k must be >= 1, got {k}")
    if predicted.shape[1] < k:
        raise MetricsError(f"k={k} exceeds prediction width {predicted.shape[1]}")


def precision_at_k(predicted: np.ndarray, corpus: Corpus, k: int) -> tuple[float, int, int]:
    """Mean over queries of |top-k hits| / k; returns (value, evaluated, skipped)."""
    predicted = np.asarray(predicted)
    _check_k(predicted, k)
    truth = _truth_sets(corpus)
    total = 0.0
    evaluated = skipped = 0
    for i in range(corpus.num_queries):
        if not truth[i]:
            skipped += 1
            continue
        hits = sum(1 for c in predicted[i, :k] if int(c) in truth[i])
        total += hits / k
        evaluated += 1
    value = total / evaluated if evaluated else 0.0
    return value, evaluated, skipped


def recall_at_k(predicted: np.ndarray, corpus: Corpus, k: int) -> tuple[float, int, int]:
    """Mean over queries of |top-k hits| / |P_i|."""
    predicted = np.asarray(predicted)
    _check_k(predicted, k)
    truth = _truth_sets(corpus)
    total = 0.0
    evaluated = skipped = 0
    for i in range(corpus.num_queries):
        if not truth[i]:
            skipped += 1
            continue
        hits = sum(1 for c in predicted[i, :k] if int(c) in truth[i])
        total += hits / len(truth[i])
        evaluated += 1
    value = total / evaluated if evaluated else 0.0
    return value, evaluated, skipped


def psp_at_k(
    predicted: np.ndarray,
    corpus: Corpus,
    propensities: PropensityTable,
    k: int,
) -> tuple[float, float, int, int]:
    """Propensity-scored precision, normalized by the ideal ranking.

    Returns (psp, mean unnormalized sp, evaluated, skipped).  The ideal
    ranking places a query's true labels in descending 1/p order, so a
    perfect ranker scores exactly 1.0 even when |P_i| < k.
    """
    predicted = np.asarray(predicted)
    _check_k(predicted, k)
    if propensities.p.shape[0] != corpus.num_labels:
        raise MetricsError("propensity table does not match corpus label count")
    truth = _truth_sets(corpus)
    inv_p = 1.0 / propensities.p
    num = 0.0
    den = 0.0
    sp_sum = 0.0
    evaluated = skipped = 0
    for i in range(corpus.num_queries):
        if not truth[i]:
            skipped += 1
            continue
        sp = sum(inv_p[int(c)] for c in predicted[i, :k] if int(c) in truth[i]) / k
        pos = sorted(truth[i], key=lambda c: (-inv_p[c], c))[:k]
        ideal = sum(inv_p[c] for c in pos) / k
        num += sp
        den += ideal
        sp_sum += sp
        evaluated += 1
    psp = num / den if den > 0 else 0.0
    mean_sp = sp_sum / evaluated if evaluated else 0.0
    return psp, mean_sp, evaluated, skipped


def evaluate(
    predicted: np.ndarray,
    corpus: Corpus,
    propensities: PropensityTable,
    ks: list[int],
) -> EvalResult:
    """All metrics at each k in ``ks`` against the corpus ground truth."""
    result = EvalResult()
    for k in sorted(set(ks)):
        p, evaluated, skipped = precision_at_k(predicted, corpus, k)
        r, _, _ = recall_at_k(predicted, corpus, k)
        psp, sp, _, _ = psp_at_k(predicted, corpus, propensities, k)
        result.p_at[k] = p
        result.r_at[k] = r
        result.psp_at[k] = psp
        result.sp_at[k] = sp
        result.evaluated = evaluated
        result.skipped = skipped
    return result
