"""Command-line interface.

Subcommands: ingest, train, eval, predict, loss-landscape.  Exit codes:
0 success, 2 usage error, 3 data error, 4 numerical abort.  The environment
variable PRIME_SEED overrides --seed everywhere.  Flag precedence is
flags > --config file (JSON) > built-in defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import (
    CorpusError,
    compute_propensities,
    ingest,
    load_propensities,
    save_propensities,
    serialize_corpus,
)
from .encoder import EncoderError, encode_texts
from .losses import MarginConfig, Region, triplet_clipped_dynamic, triplet_fixed
from .metrics import MetricsError, evaluate
from .prototype_net import PrototypeError, materialize_all_prototypes
from .retrieval import (
    RetrievalError,
    build_index,
    export_prototypes,
    read_predictions,
    topk_batch,
    write_predictions,
)
from .trainer import NumericalAbort, TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(ValueError):
    """Bad flag combination detected after parsing."""


_TRAIN_DEFAULTS = {
    "lr": 2e-4,
    "weight_decay": 0.01,
    "epochs": 50,
    "batch_size": 16,
    "positives": 2,
    "gamma_min": 0.1,
    "gamma_max": 0.3,
    "fixed_margin": 0.3,
    "reg_margin": 0.0,
    "lam": 0.1,
    "mode": "dynamic",
    "terms": "q2p,q2l,l2q",
    "alpha": 0.95,
    "bank_size": 8,
    "dim": 64,
    "vocab_size": 65536,
    "t_max": 32,
    "d_ffn": 0,
    "dropout": 0.0,
    "seed": 7,
    "refresh_period": 10,
    "warmup_steps": 0,
    "propensity_a": 0.55,
    "propensity_b": 1.5,
    "threads": 1,
}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _resolve_seed(args) -> int:
    env = os.environ.get("PRIME_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"PRIME_SEED must be an integer, got {env!r}") from exc
    return int(args.seed)


def _merged_options(args, parser_defaults: dict) -> dict:
    """flags > config file > defaults, field by field."""
    merged = dict(parser_defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CorpusError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorpusError(f"config file {path} is not valid JSON: {exc}") from exc
        unknown = set(loaded) - set(parser_defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        merged.update(loaded)
    for key in parser_defaults:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    return merged


def _train_config(opts: dict, seed: int, threads: int) -> TrainConfig:
    if opts["gamma_min"] > opts["gamma_max"]:
        raise UsageError(
            f"gamma-min {opts['gamma_min']} exceeds gamma-max {opts['gamma_max']}"
        )
    if opts["positives"] not in (1, 2):
        raise UsageError(f"positives must be 1 or 2, got {opts['positives']}")
    terms = tuple(t for t in str(opts["terms"]).split(",") if t)
    try:
        margins = MarginConfig(
            gamma_min=float(opts["gamma_min"]),
            gamma_max=float(opts["gamma_max"]),
            fixed_margin=float(opts["fixed_margin"]),
            reg_margin=float(opts["reg_margin"]),
            lam=float(opts["lam"]),
        )
        return TrainConfig(
            lr=float(opts["lr"]),
            weight_decay=float(opts["weight_decay"]),
            epochs=int(opts["epochs"]),
            batch_size=int(opts["batch_size"]),
            positives_per_query=int(opts["positives"]),
            margins=margins,
            mode=str(opts["mode"]),
            terms=terms,
            alpha=float(opts["alpha"]),
            bank_size=int(opts["bank_size"]),
            dim=int(opts["dim"]),
            vocab_size=int(opts["vocab_size"]),
            t_max=int(opts["t_max"]),
            d_ffn=int(opts["d_ffn"]),
            dropout=float(opts["dropout"]),
            seed=seed,
            refresh_period=int(opts["refresh_period"]),
            warmup_steps=int(opts["warmup_steps"]),
            propensity_a=float(opts["propensity_a"]),
            propensity_b=float(opts["propensity_b"]),
            threads=threads,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_ingest(args) -> int:
    corpus = ingest(args.queries, args.labels, allow_empty=args.allow_empty)
    table = compute_propensities(corpus, args.propensity_a, args.propensity_b)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    q_path = out / "queries.tsv"
    l_path = out / "labels.tsv"
    p_path = out / "propensities.tsv"
    serialize_corpus(corpus, q_path, l_path)
    save_propensities(table, corpus, p_path)
    stats = {
        "num_queries": corpus.num_queries,
        "num_labels": corpus.num_labels,
        "nnz": corpus.nnz,
        "propensity_a": table.a_const,
        "propensity_b": table.b_const,
        "inputs": {
            "queries": _sha256(Path(args.queries)),
            "labels": _sha256(Path(args.labels)),
        },
        "outputs": {
            "queries": _sha256(q_path),
            "labels": _sha256(l_path),
            "propensities": _sha256(p_path),
        },
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    print(f"ingested {corpus.num_queries} queries, {corpus.num_labels} labels, nnz={corpus.nnz}")
    print(f"wrote {q_path}, {l_path}, {p_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    opts = _merged_options(args, _TRAIN_DEFAULTS)
    seed = _resolve_seed(argparse.Namespace(seed=opts["seed"]))
    threads = int(opts["threads"])
    config = _train_config(opts, seed, threads)
    corpus = ingest(args.queries, args.labels, allow_empty=args.allow_empty)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    ckpt_path = out / "checkpoint.prime"
    started = _utc_now()
    with open(log_path, "w", encoding="utf-8", newline="\n") as log_stream:
        result = train(corpus, config, log_stream=log_stream)
    save_checkpoint(ckpt_path, result.model)
    manifest = {
        "command": "train",
        "config": {**opts, "seed": seed, "threads": threads},
        "corpus": {
            "queries": _sha256(Path(args.queries)),
            "labels": _sha256(Path(args.labels)),
            "num_queries": corpus.num_queries,
            "num_labels": corpus.num_labels,
            "nnz": corpus.nnz,
        },
        "seed": seed,
        "git": _git_describe(),
        "started": started,
        "finished": _utc_now(),
        "outputs": {
            "checkpoint": {"path": str(ckpt_path), "sha256": _sha256(ckpt_path)},
            "train_log": {"path": str(log_path), "sha256": _sha256(log_path)},
        },
        "summary": result.summary,
        "epochs": result.epoch_reports,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    s = result.summary
    print(
        f"trained {config.epochs} epochs ({s['steps']} steps): "
        f"loss={s['final_mean_loss']:.4f} P@1={s['train_p_at_1']:.4f} R@5={s['train_r_at_5']:.4f}"
    )
    print(f"wrote {ckpt_path}")
    return EXIT_OK


def _load_eval_inputs(args):
    model = load_checkpoint(args.checkpoint)
    corpus = ingest(args.queries, args.labels, allow_empty=args.allow_empty)
    if corpus.num_labels != model.centroids.centroids.shape[0]:
        raise CorpusError(
            f"checkpoint was trained with {model.centroids.centroids.shape[0]} labels, "
            f"corpus has {corpus.num_labels}"
        )
    return model, corpus


def _label_matrix(model, corpus, mode: str, threads: int) -> np.ndarray:
    if mode == "text-embedding":
        return encode_texts(model.encoder, list(corpus.label_texts)).vectors
    return materialize_all_prototypes(
        model.proto, model.encoder, corpus, model.centroids, model.bank, threads=threads
    )


def _parse_ks(raw: str) -> list[int]:
    try:
        ks = [int(tok) for tok in raw.split(",") if tok]
    except ValueError as exc:
        raise UsageError(f"bad k list {raw!r}") from exc
    if not ks or any(k < 1 for k in ks):
        raise UsageError(f"bad k list {raw!r}")
    return ks


def cmd_eval(args) -> int:
    ks = _parse_ks(args.k)
    model, corpus = _load_eval_inputs(args)
    if args.propensities:
        table = load_propensities(args.propensities, corpus)
    else:
        table = compute_propensities(corpus)
    if args.from_predictions:
        cols, _ = read_predictions(args.from_predictions, corpus)
        if cols.shape[1] < max(ks):
            raise UsageError(f"prediction file width {cols.shape[1]} < max k {max(ks)}")
    else:
        if max(ks) > corpus.num_labels:
            raise UsageError(f"k={max(ks)} exceeds label count {corpus.num_labels}")
        matrix = _label_matrix(model, corpus, args.mode, args.threads)
        index = build_index(matrix, corpus.label_ids)
        queries = encode_texts(model.encoder, list(corpus.query_texts)).vectors
        cols, scores = topk_batch(index, queries, max(ks), threads=args.threads)
        if args.predictions:
            write_predictions(args.predictions, corpus.query_ids, corpus.label_ids, cols, scores)
        if args.save_prototypes:
            export_prototypes(args.save_prototypes, corpus.label_ids, matrix)
    result = evaluate(cols, corpus, table, ks)
    if args.out:
        Path(args.out).write_text(result.to_json() + "\n", encoding="utf-8")
    print(result.to_table())
    return EXIT_OK


def cmd_predict(args) -> int:
    k_list = _parse_ks(args.k)
    if len(k_list) != 1:
        raise UsageError("predict takes a single k")
    k = k_list[0]
    model, corpus = _load_eval_inputs(args)
    if k > corpus.num_labels:
        raise UsageError(f"k={k} exceeds label count {corpus.num_labels}")
    matrix = _label_matrix(model, corpus, args.mode, args.threads)
    index = build_index(matrix, corpus.label_ids)
    queries = encode_texts(model.encoder, list(corpus.query_texts)).vectors
    cols, scores = topk_batch(index, queries, k, threads=args.threads)
    write_predictions(args.out, corpus.query_ids, corpus.label_ids, cols, scores)
    if args.save_prototypes:
        export_prototypes(args.save_prototypes, corpus.label_ids, matrix)
    print(f"wrote {args.out} ({corpus.num_queries} queries, top-{k})")
    return EXIT_OK


def cmd_loss_landscape(args) -> int:
    if args.resolution < 2:
        raise UsageError(f"resolution must be >= 2, got {args.resolution}")
    cfg = MarginConfig(
        gamma_min=args.gamma_min,
        gamma_max=args.gamma_max,
        fixed_margin=args.fixed_margin,
        reg_margin=_TRAIN_DEFAULTS["reg_margin"],
        lam=_TRAIN_DEFAULTS["lam"],
    )
    grid = np.linspace(-1.0, 1.0, args.resolution)
    out = Path(args.out)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(
            "s_qp,s_qn,fixed_loss,fixed_d_sap,fixed_d_san,fixed_region,"
            "dynamic_loss,dynamic_d_sap,dynamic_d_san,dynamic_region\n"
        )
        for sp in grid:
            for sn in grid:
                f = triplet_fixed(float(sp), float(sn), cfg.fixed_margin)
                d = triplet_clipped_dynamic(float(sp), float(sn), cfg)
                fh.write(
                    f"{sp:.6f},{sn:.6f},"
                    f"{f.loss:.9f},{f.d_sap:.1f},{f.d_san:.1f},{Region(f.region).name.lower()},"
                    f"{d.loss:.9f},{d.d_sap:.1f},{d.d_san:.1f},{Region(d.region).name.lower()}\n"
                )
    print(f"wrote {out} ({args.resolution}x{args.resolution} grid)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prime",
        description="Prototype-based extreme multi-label retrieval engine.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ing = sub.add_parser("ingest", help="validate corpus files, write canonical form and propensities")
    p_ing.add_argument("--queries", required=True)
    p_ing.add_argument("--labels", required=True)
    p_ing.add_argument("--out", required=True)
    p_ing.add_argument("--allow-empty", action="store_true", dest="allow_empty",
                       help="permit queries with no positive labels (test splits)")
    p_ing.add_argument("--propensity-a", type=float, default=0.55, dest="propensity_a")
    p_ing.add_argument("--propensity-b", type=float, default=1.5, dest="propensity_b")
    p_ing.set_defaults(func=cmd_ingest)

    p_tr = sub.add_parser("train", help="train a model and write checkpoint + manifest")
    p_tr.add_argument("--queries", required=True)
    p_tr.add_argument("--labels", required=True)
    p_tr.add_argument("--out", required=True)
    p_tr.add_argument("--config", help="JSON file of option defaults (flags still win)")
    p_tr.add_argument("--allow-empty", action="store_true", dest="allow_empty")
    p_tr.add_argument("--lr", type=float)
    p_tr.add_argument("--weight-decay", type=float, dest="weight_decay")
    p_tr.add_argument("--epochs", type=int)
    p_tr.add_argument("--batch-size", type=int, dest="batch_size")
    p_tr.add_argument("--positives", type=int)
    p_tr.add_argument("--gamma-min", type=float, dest="gamma_min")
    p_tr.add_argument("--gamma-max", type=float, dest="gamma_max")
    p_tr.add_argument("--fixed-margin", type=float, dest="fixed_margin")
    p_tr.add_argument("--reg-margin", type=float, dest="reg_margin")
    p_tr.add_argument("--lam", type=float, help="regularizer weight")
    p_tr.add_argument("--mode", choices=["dynamic", "fixed"])
    p_tr.add_argument("--terms", help="comma list from q2p,q2l,l2q")
    p_tr.add_argument("--alpha", type=float, help="centroid EMA decay")
    p_tr.add_argument("--bank-size", type=int, dest="bank_size")
    p_tr.add_argument("--dim", type=int)
    p_tr.add_argument("--vocab-size", type=int, dest="vocab_size")
    p_tr.add_argument("--t-max", type=int, dest="t_max")
    p_tr.add_argument("--d-ffn", type=int, dest="d_ffn")
    p_tr.add_argument("--dropout", type=float)
    p_tr.add_argument("--seed", type=int)
    p_tr.add_argument("--refresh-period", type=int, dest="refresh_period")
    p_tr.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    p_tr.add_argument("--propensity-a", type=float, dest="propensity_a")
    p_tr.add_argument("--propensity-b", type=float, dest="propensity_b")
    p_tr.add_argument("--threads", type=int)
    p_tr.set_defaults(func=cmd_train)

    def add_eval_common(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--queries", required=True)
        p.add_argument("--labels", required=True)
        p.add_argument("--mode", choices=["prototype", "text-embedding"], default="prototype")
        p.add_argument("--allow-empty", action="store_true", dest="allow_empty")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--save-prototypes", dest="save_prototypes",
                       help="write the scored label matrix as id<TAB>f32-hex lines")

    p_ev = sub.add_parser("eval", help="score a corpus and report P@k / PSP@k / R@k")
    add_eval_common(p_ev)
    p_ev.add_argument("--k", default="1,3,5", help="comma list of cutoffs")
    p_ev.add_argument("--out", help="metrics JSON path")
    p_ev.add_argument("--predictions", help="also write a predictions file")
    p_ev.add_argument("--propensities", help="propensity table from ingest (else fit on this corpus)")
    p_ev.add_argument("--from-predictions", dest="from_predictions",
                      help="evaluate an existing predictions file instead of the model")
    p_ev.set_defaults(func=cmd_eval)

    p_pr = sub.add_parser("predict", help="write top-k predictions for a corpus")
    add_eval_common(p_pr)
    p_pr.add_argument("--k", default="5")
    p_pr.add_argument("--out", required=True)
    p_pr.set_defaults(func=cmd_predict)

    p_ll = sub.add_parser("loss-landscape", help="dump loss/gradient grid for both kernels")
    p_ll.add_argument("--out", required=True)
    p_ll.add_argument("--resolution", type=int, default=201)
    p_ll.add_argument("--gamma-min", type=float, default=0.1, dest="gamma_min")
    p_ll.add_argument("--gamma-max", type=float, default=0.3, dest="gamma_max")
    p_ll.add_argument("--fixed-margin", type=float, default=0.3, dest="fixed_margin")
    p_ll.set_defaults(func=cmd_loss_landscape)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, CheckpointError, MetricsError, RetrievalError,
            EncoderError, PrototypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        if exc.report is not None:
            print(exc.report.to_json_line(), file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
