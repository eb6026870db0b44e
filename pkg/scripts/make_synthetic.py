#!/usr/bin/env python3
"""Emit one of the built-in synthetic corpora as TSV files.

Kinds:
  planted   3 clusters x 3 labels, 30 queries, fully separable (smoke/demo)
  ablation  2000 queries / 500 labels with 5% of positive pairs hidden;
            writes the observed split and, with --full-out, the uncensored one
  bigpool   10000 labels / 320 queries for candidate-pool stress runs
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from prime_xmc.corpus import serialize_corpus
from prime_xmc.synth import ablation_corpus, bigpool_corpus, planted_corpus


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kind", choices=["planted", "ablation", "bigpool"], required=True)
    ap.add_argument("--out", required=True, help="directory for queries.tsv / labels.tsv")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--full-out", help="ablation only: directory for the uncensored split")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kwargs = {} if args.seed is None else {"seed": args.seed}

    if args.kind == "planted":
        corpus = planted_corpus(**kwargs)
    elif args.kind == "bigpool":
        corpus = bigpool_corpus(**kwargs)
    else:
        observed, full = ablation_corpus(**kwargs)
        if args.full_out:
            full_dir = Path(args.full_out)
            full_dir.mkdir(parents=True, exist_ok=True)
            serialize_corpus(full, full_dir / "queries.tsv", full_dir / "labels.tsv")
            print(f"wrote uncensored split to {full_dir}")
        corpus = observed

    serialize_corpus(corpus, out / "queries.tsv", out / "labels.tsv")
    print(
        f"wrote {args.kind} corpus to {out}: "
        f"{corpus.num_queries} queries, {corpus.num_labels} labels, nnz={corpus.nnz}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
