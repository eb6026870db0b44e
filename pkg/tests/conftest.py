from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from prime_xmc.corpus import Corpus


def make_corpus(query_rows, label_rows) -> Corpus:
    """Corpus from (id, positives, text) query rows and (id, text) label rows."""
    col_of = {lid: i for i, (lid, _) in enumerate(label_rows)}
    indptr = [0]
    indices: list[int] = []
    for _, pos, _ in query_rows:
        indices.extend(col_of[p] for p in pos)
        indptr.append(len(indices))
    return Corpus(
        query_ids=tuple(q[0] for q in query_rows),
        query_texts=tuple(q[2] for q in query_rows),
        label_ids=tuple(l[0] for l in label_rows),
        label_texts=tuple(l[1] for l in label_rows),
        indptr=np.asarray(indptr, dtype=np.int64),
        indices=np.asarray(indices, dtype=np.int64),
    )


@pytest.fixture
def toy_corpus() -> Corpus:
    return make_corpus(
        [
            ("q0", ["l0", "l1"], "red apple fruit"),
            ("q1", ["l2"], "blue whale ocean"),
        ],
        [("l0", "apple"), ("l1", "red fruit"), ("l2", "whale")],
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
