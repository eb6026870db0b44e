"""Joint training loop and AdamW optimizer (bias-corrected, decoupled decay).

One step: encode the batch queries and the pooled labels, run the prototype
block, score both routes, take the combined loss, backpropagate by hand into
every parameter group, apply AdamW, then advance the EMA centroids of the
pool labels using the pre-update query embeddings.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, compute_propensities
from .encoder import encode_backward, encode_forward, tokenize
from .losses import (
    LossReport,
    MarginConfig,
    RegularizerInputs,
    TripletView,
    combined_loss,
)
from .model import ParamGroup, PrimeModel, initialize_model, named_parameters
from .prototype_net import materialize_all_prototypes, prototype_backward, prototype_forward
from .sampling import assemble_triplet_batch, build_batch_plan, sample_positives


class NumericalAbort(RuntimeError):
    """Non-finite loss or gradient; carries the last loss report if present."""

    def __init__(self, message: str, report: LossReport | None = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 0.01
    epochs: int = 50
    batch_size: int = 16
    positives_per_query: int = 2
    margins: MarginConfig = field(default_factory=MarginConfig)
    mode: str = "dynamic"
    terms: tuple[str, ...] = ("q2p", "q2l", "l2q")
    alpha: float = 0.95
    bank_size: int = 8
    dim: int = 64
    vocab_size: int = 65536
    t_max: int = 32
    d_ffn: int = 0  # 0 means 4 * dim
    dropout: float = 0.0
    seed: int = 7
    refresh_period: int = 10
    warmup_steps: int = 0
    propensity_a: float = 0.55
    propensity_b: float = 1.5
    threads: int = 1

    def __post_init__(self) -> None:
        if self.positives_per_query not in (1, 2):
            raise ValueError(f"positives_per_query must be 1 or 2, got {self.positives_per_query}")
        if self.mode not in ("dynamic", "fixed"):
            raise ValueError(f"mode must be 'dynamic' or 'fixed', got {self.mode!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be >= 1")
        unknown = set(self.terms) - {"q2p", "q2l", "l2q"}
        if unknown:
            raise ValueError(f"unknown loss terms: {sorted(unknown)}")
        if not self.terms and self.margins.lam == 0.0:
            raise ValueError("at least one loss term or a nonzero lam is required")

    @property
    def effective_d_ffn(self) -> int:
        return self.d_ffn if self.d_ffn > 0 else 4 * self.dim


@dataclass
class OptimizerState:
    """AdamW first/second moment buffers, keyed by parameter group name."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, groups: list[ParamGroup]) -> "OptimizerState":
        return cls(
            m={g.name: np.zeros_like(g.value) for g in groups},
            v={g.name: np.zeros_like(g.value) for g in groups},
        )


def optimizer_step(
    groups: list[ParamGroup],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
) -> None:
    """One AdamW update over all groups; decay only where the group allows it."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for g in groups:
        if not np.all(np.isfinite(g.grad)):
            raise NumericalAbort(f"non-finite gradient in parameter group {g.name!r}")
        m = state.m[g.name]
        v = state.v[g.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (g.grad * g.grad)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if g.decay:
            update = update + weight_decay * g.value
        g.value[...] = g.value - lr * update


@dataclass
class TrainResult:
    model: PrimeModel
    epoch_reports: list[dict]
    step_reports: list[LossReport]
    pool_sizes: list[int]
    summary: dict


def _score_pool(h_q: np.ndarray, mat: np.ndarray) -> np.ndarray:
    return h_q @ mat.T


def train(
    corpus: Corpus,
    config: TrainConfig,
    log_stream=None,
    model: PrimeModel | None = None,
) -> TrainResult:
    """Train a model on ``corpus``; deterministic in config.seed.

    ``log_stream`` receives one JSON line per step when provided.  A partly
    trained ``model`` may be passed to continue training (same corpus).
    """
    t_start = time.time()
    if corpus.num_queries < config.batch_size:
        raise ValueError(
            f"corpus has {corpus.num_queries} queries, need >= batch_size {config.batch_size}"
        )
    if model is None:
        model = initialize_model(
            corpus,
            dim=config.dim,
            vocab_size=config.vocab_size,
            t_max=config.t_max,
            d_ffn=config.effective_d_ffn,
            dropout=config.dropout,
            alpha=config.alpha,
            bank_size=config.bank_size,
            seed=config.seed,
        )
    enc = model.encoder

    query_seqs = [tokenize(t, enc.vocab_size, enc.t_max) for t in corpus.query_texts]
    label_seqs = [tokenize(t, enc.vocab_size, enc.t_max) for t in corpus.label_texts]

    propensities = compute_propensities(corpus, config.propensity_a, config.propensity_b)

    root = np.random.SeedSequence([config.seed, 0x7E41])
    ss_sampling, ss_dropout, ss_plan = root.spawn(3)
    sampling_rng = np.random.default_rng(ss_sampling)
    dropout_rng = np.random.default_rng(ss_dropout)
    plan_seed = int(ss_plan.generate_state(1, dtype=np.uint32)[0])

    groups = named_parameters(model)
    opt = OptimizerState.create(groups)

    cfg = config.margins
    max_pool = config.batch_size * config.positives_per_query
    plan = None
    step = 0
    step_reports: list[LossReport] = []
    pool_sizes: list[int] = []
    epoch_reports: list[dict] = []

    for epoch in range(config.epochs):
        if plan is None or (epoch % config.refresh_period == 0 and epoch > 0):
            q_emb = encode_forward(enc, query_seqs).vectors
            plan = build_batch_plan(q_emb, config.batch_size, plan_seed + epoch, config.refresh_period)
            label_emb = encode_forward(enc, label_seqs).vectors
            model.centroids.refresh_untouched(label_emb)
        batches = plan.epoch_batches(epoch)
        epoch_losses: list[float] = []
        epoch_regions = np.zeros(3, dtype=np.int64)

        for batch_queries in batches:
            b = len(batch_queries)
            enc_q = encode_forward(enc, [query_seqs[i] for i in batch_queries])
            h_q = enc_q.vectors

            pos_labels = np.empty((b, config.positives_per_query), dtype=np.int64)
            pos_mask = np.empty((b, config.positives_per_query), dtype=bool)
            for row, qi in enumerate(batch_queries):
                pos_labels[row], pos_mask[row] = sample_positives(
                    int(qi), corpus, propensities, config.positives_per_query, sampling_rng
                )
            tb = assemble_triplet_batch(batch_queries, pos_labels, pos_mask, corpus)
            k = tb.pool_size
            if k > max_pool:
                raise RuntimeError(f"pool size {k} exceeds complexity bound {max_pool}")
            pool_sizes.append(k)
            if k == 0:
                step += 1
                continue

            enc_l = encode_forward(enc, [label_seqs[j] for j in tb.pool])
            h_l = enc_l.vectors
            c_rows = model.centroids.centroids[tb.pool]
            v_rows, _, _ = model.bank.gather(tb.pool)
            step_seed = int(dropout_rng.integers(0, 2**63 - 1))
            pb = prototype_forward(
                model.proto, h_l, c_rows, v_rows, train_mode=True, rng_seed=step_seed
            )
            z = pb.z

            proto_sims = _score_pool(h_q, z)      # b_ql = h_q . z_l
            text_sims = _score_pool(h_q, h_l)     # s_ql = h_q . h_l

            rows = np.arange(b)[:, None]
            row_of_slot = np.broadcast_to(rows, pos_mask.shape)
            pos_k_mask = np.zeros((b, k), dtype=bool)
            pos_k_mask[row_of_slot[pos_mask], tb.pos_cols[pos_mask]] = True

            views = {}
            if "q2p" in config.terms:
                views["q2p"] = TripletView(
                    sim_pos=np.where(pos_mask, proto_sims[rows, tb.pos_cols], 0.0),
                    sim_neg=proto_sims,
                    pos_mask=pos_mask,
                    neg_mask=tb.negative_mask,
                    pos_ids=tb.pos_labels,
                    neg_ids=tb.pool,
                )
            if "q2l" in config.terms:
                views["q2l"] = TripletView(
                    sim_pos=np.where(pos_mask, text_sims[rows, tb.pos_cols], 0.0),
                    sim_neg=text_sims,
                    pos_mask=pos_mask,
                    neg_mask=tb.negative_mask,
                    pos_ids=tb.pos_labels,
                    neg_ids=tb.pool,
                )
            if "l2q" in config.terms:
                views["l2q"] = TripletView(
                    sim_pos=text_sims.T,
                    sim_neg=text_sims.T,
                    pos_mask=tb.membership.T,
                    neg_mask=tb.negative_mask.T,
                )
            reg = RegularizerInputs(
                text_sims=text_sims,
                proto_sims=proto_sims,
                pos_mask=pos_k_mask,
                neg_mask=tb.negative_mask,
            ) if cfg.lam > 0 else None

            res = combined_loss(
                views.get("q2p"), views.get("q2l"), views.get("l2q"), reg,
                cfg, mode=config.mode, step=step,
            )
            report = res.report
            report.epoch = epoch
            report.pool_size = k
            if not np.isfinite(report.total):
                raise NumericalAbort("non-finite training loss", report)

            grad_proto_sims = np.zeros_like(proto_sims)
            grad_text_sims = np.zeros_like(text_sims)
            if "q2p" in res.term_grads:
                gp, gn = res.term_grads["q2p"]
                np.add.at(grad_proto_sims, (row_of_slot[pos_mask], tb.pos_cols[pos_mask]), gp[pos_mask])
                grad_proto_sims += gn
            if "q2l" in res.term_grads:
                gp, gn = res.term_grads["q2l"]
                np.add.at(grad_text_sims, (row_of_slot[pos_mask], tb.pos_cols[pos_mask]), gp[pos_mask])
                grad_text_sims += gn
            if "l2q" in res.term_grads:
                gp, gn = res.term_grads["l2q"]
                grad_text_sims += (gp + gn).T
            if res.reg_grad_text is not None:
                grad_text_sims += res.reg_grad_text
                grad_proto_sims += res.reg_grad_proto

            d_hq = grad_proto_sims @ z + grad_text_sims @ h_l
            d_z = grad_proto_sims.T @ h_q
            d_hl = grad_text_sims.T @ h_q

            d_hl_proto, d_v = prototype_backward(model.proto, model.proto_grads, pb, d_z)
            d_hl += d_hl_proto
            model.bank.accumulate_grad(tb.pool, d_v)
            encode_backward(enc, model.encoder_grads, enc_l, d_hl)
            encode_backward(enc, model.encoder_grads, enc_q, d_hq)

            lr_t = config.lr
            if config.warmup_steps > 0 and step < config.warmup_steps:
                lr_t = config.lr * (step + 1) / config.warmup_steps
            optimizer_step(groups, opt, lr_t, config.weight_decay)
            model.zero_grads()

            model.centroids.batch_update(tb.pool, tb.membership, h_q)

            step_reports.append(report)
            epoch_losses.append(report.total)
            epoch_regions += report.region_counts
            if log_stream is not None:
                log_stream.write(report.to_json_line() + "\n")
            step += 1

        total_regions = int(epoch_regions.sum())
        epoch_reports.append({
            "epoch": epoch,
            "mean_loss": float(np.mean(epoch_losses)) if epoch_losses else 0.0,
            "steps": len(epoch_losses),
            "easy_fraction": float(epoch_regions[0] / total_regions) if total_regions else 0.0,
            "regions": [int(x) for x in epoch_regions],
        })

    prototypes = materialize_all_prototypes(
        model.proto, enc, corpus, model.centroids, model.bank, threads=config.threads
    )
    q_emb = encode_forward(enc, query_seqs).vectors
    hits1 = 0
    hits5 = 0
    denom5 = 0
    for i in range(corpus.num_queries):
        scores = prototypes @ q_emb[i]
        order = np.lexsort((np.arange(len(scores)), -scores))
        truth = set(int(x) for x in corpus.positives(i))
        if not truth:
            continue
        hits1 += int(int(order[0]) in truth)
        top5 = set(int(x) for x in order[:5])
        hits5 += len(top5 & truth)
        denom5 += len(truth)
    n_eval = max(1, corpus.num_queries)
    summary = {
        "train_p_at_1": hits1 / n_eval,
        "train_r_at_5": hits5 / max(1, denom5),
        "final_mean_loss": epoch_reports[-1]["mean_loss"] if epoch_reports else 0.0,
        "steps": step,
        "max_pool_size": max(pool_sizes) if pool_sizes else 0,
        "wall_seconds": time.time() - t_start,
    }
    return TrainResult(
        model=model,
        epoch_reports=epoch_reports,
        step_reports=step_reports,
        pool_sizes=pool_sizes,
        summary=summary,
    )
