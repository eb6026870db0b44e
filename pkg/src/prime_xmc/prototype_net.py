"""Label prototype network and its supporting stores.

A label's prototype is produced from three unit-norm slots: the label's text
embedding, an EMA centroid of query embeddings observed for the label, and a
free vector shared by a cluster of labels.  The three slots pass through one
pre-norm transformer encoder block (single-head attention, GELU FFN); the
block output tokens are mean-pooled and L2-normalized.

Residual connections add onto the layer-normed activations, so zeroed
attention and FFN weights collapse the block to layer normalization alone.
There are no positional encodings and the projections are shared across
slots, so the pooled output is invariant to slot permutation.

Forward-pass contractions use np.einsum without BLAS so each row's output is
independent of batch composition and shard boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .clustering import cluster_labels  # re-exported; bank assignment uses it

__all__ = [
    "PrototypeNetParams",
    "PrototypeNetGrads",
    "PrototypeBatch",
    "CentroidStore",
    "FreeVectorBank",
    "PrototypeError",
    "prototype_forward",
    "prototype_backward",
    "materialize_all_prototypes",
    "cluster_labels",
]

_LN_EPS = 1e-5
_NORM_FLOOR = 1e-12
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class PrototypeError(ValueError):
    """Numeric overflow or degenerate state inside the prototype network."""


def _gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + erf(u * _INV_SQRT2))


def _gelu_grad(u: np.ndarray) -> np.ndarray:
    phi = 0.5 * (1.0 + erf(u * _INV_SQRT2))
    return phi + u * np.exp(-0.5 * u * u) * _INV_SQRT2PI


@dataclass
class PrototypeNetParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ffn_in: np.ndarray        # (d, d_ffn)
    ffn_in_bias: np.ndarray
    ffn_out: np.ndarray       # (d_ffn, d)
    ffn_out_bias: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    dim: int
    d_ffn: int
    dropout_rate: float

    @classmethod
    def initialize(cls, dim: int, d_ffn: int, dropout_rate: float, rng: np.random.Generator) -> "PrototypeNetParams":
        if d_ffn < dim:
            raise ValueError(f"d_ffn must be >= dim, got {d_ffn} < {dim}")
        if not (0.0 <= dropout_rate < 1.0):
            raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        s_attn = 1.0 / math.sqrt(dim)
        # Both residual branches start at zero output (w_o and ffn_out zeroed)
        # so the block opens as the identity path and trains itself open;
        # gradients reach the zeroed matrices first, then the rest.
        return cls(
            w_q=rng.uniform(-s_attn, s_attn, size=(dim, dim)),
            w_k=rng.uniform(-s_attn, s_attn, size=(dim, dim)),
            w_v=rng.uniform(-s_attn, s_attn, size=(dim, dim)),
            w_o=np.zeros((dim, dim)),
            ffn_in=rng.uniform(-s_attn, s_attn, size=(dim, d_ffn)),
            ffn_in_bias=np.zeros(d_ffn),
            ffn_out=np.zeros((d_ffn, dim)),
            ffn_out_bias=np.zeros(dim),
            ln1_gain=np.ones(dim),
            ln1_bias=np.zeros(dim),
            ln2_gain=np.ones(dim),
            ln2_bias=np.zeros(dim),
            dim=dim,
            d_ffn=d_ffn,
            dropout_rate=dropout_rate,
        )


@dataclass
class PrototypeNetGrads:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ffn_in: np.ndarray
    ffn_in_bias: np.ndarray
    ffn_out: np.ndarray
    ffn_out_bias: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray

    @classmethod
    def zeros(cls, params: PrototypeNetParams) -> "PrototypeNetGrads":
        return cls(**{
            name: np.zeros_like(getattr(params, name))
            for name in (
                "w_q", "w_k", "w_v", "w_o",
                "ffn_in", "ffn_in_bias", "ffn_out", "ffn_out_bias",
                "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
            )
        })

    def zero_(self) -> None:
        for name in vars(self):
            getattr(self, name).fill(0.0)


@dataclass
class PrototypeBatch:
    """Forward output plus every activation the backward pass replays."""

    z: np.ndarray              # (n, d) unit rows
    x: np.ndarray              # (n, 3, d) stacked input slots
    ln1_xhat: np.ndarray
    ln1_inv_std: np.ndarray
    attn_q: np.ndarray
    attn_k: np.ndarray
    attn_v: np.ndarray
    attn_weights: np.ndarray   # (n, 3, 3) post-softmax
    attn_ctx: np.ndarray
    mask1: np.ndarray | None
    x2: np.ndarray
    ln2_xhat: np.ndarray
    ln2_inv_std: np.ndarray
    ffn_pre: np.ndarray
    ffn_act: np.ndarray
    mask2: np.ndarray | None
    pooled: np.ndarray
    pooled_norms: np.ndarray
    train_mode: bool


def _layernorm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.einsum("ntd,ntd->nt", centered, centered, optimize=False) / x.shape[-1]
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = centered * inv_std[..., None]
    return gain * xhat + bias, xhat, inv_std


def _layernorm_backward(dy, xhat, inv_std, gain, d_gain, d_bias):
    d_gain += np.einsum("ntd,ntd->d", dy, xhat, optimize=True)
    d_bias += dy.sum(axis=(0, 1))
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv_std[..., None] * (dxhat - m1 - xhat * m2)


def prototype_forward(
    params: PrototypeNetParams,
    h: np.ndarray,
    c: np.ndarray,
    v: np.ndarray,
    train_mode: bool = False,
    rng_seed: int = 0,
) -> PrototypeBatch:
    """Map per-label slot triples (h, c, v) to unit-norm prototypes.

    Dropout (on the attention and FFN branch outputs) is active only in
    train mode; its masks are drawn from ``rng_seed`` and cached for the
    backward pass.
    """
    if h.shape != c.shape or h.shape != v.shape:
        raise PrototypeError("slot shapes must match")
    n, d = h.shape
    if d != params.dim:
        raise PrototypeError(f"input dim {d} does not match params dim {params.dim}")
    x = np.stack([h, c, v], axis=1)  # (n, 3, d)

    a, xhat1, inv1 = _layernorm_forward(x, params.ln1_gain, params.ln1_bias)
    q = np.einsum("ntd,de->nte", a, params.w_q, optimize=False)
    k = np.einsum("ntd,de->nte", a, params.w_k, optimize=False)
    vp = np.einsum("ntd,de->nte", a, params.w_v, optimize=False)
    scores = np.einsum("nte,nse->nts", q, k, optimize=False) / math.sqrt(d)
    scores -= scores.max(axis=-1, keepdims=True)
    expm = np.exp(scores)
    weights = expm / expm.sum(axis=-1, keepdims=True)
    ctx = np.einsum("nts,nse->nte", weights, vp, optimize=False)
    attn_out = np.einsum("ntf,fe->nte", ctx, params.w_o, optimize=False)

    mask1 = mask2 = None
    if train_mode and params.dropout_rate > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed) & 0x7FFFFFFFFFFFFFFF, 0xD0]))
        keep = 1.0 - params.dropout_rate
        mask1 = (rng.random(attn_out.shape) < keep) / keep
        mask2 = (rng.random((n, 3, d)) < keep) / keep
        attn_out = attn_out * mask1

    x2 = a + attn_out
    b, xhat2, inv2 = _layernorm_forward(x2, params.ln2_gain, params.ln2_bias)
    ffn_pre = np.einsum("ntd,df->ntf", b, params.ffn_in, optimize=False) + params.ffn_in_bias
    ffn_act = _gelu(ffn_pre)
    ffn_out = np.einsum("ntf,fd->ntd", ffn_act, params.ffn_out, optimize=False) + params.ffn_out_bias
    if mask2 is not None:
        ffn_out = ffn_out * mask2
    x3 = b + ffn_out

    pooled = x3.mean(axis=1)
    norms = np.sqrt(np.einsum("nd,nd->n", pooled, pooled, optimize=False))
    if np.any(norms < _NORM_FLOOR):
        row = int(np.argmin(norms))
        raise PrototypeError(f"degenerate prototype: row {row} has norm {norms[row]:.3e}")
    z = pooled / norms[:, None]
    if not np.all(np.isfinite(z)):
        raise PrototypeError("prototype overflow: non-finite output")
    return PrototypeBatch(
        z=z, x=x, ln1_xhat=xhat1, ln1_inv_std=inv1,
        attn_q=q, attn_k=k, attn_v=vp, attn_weights=weights, attn_ctx=ctx,
        mask1=mask1, x2=x2, ln2_xhat=xhat2, ln2_inv_std=inv2,
        ffn_pre=ffn_pre, ffn_act=ffn_act, mask2=mask2,
        pooled=pooled, pooled_norms=norms, train_mode=train_mode,
    )


def prototype_backward(
    params: PrototypeNetParams,
    grads: PrototypeNetGrads,
    batch: PrototypeBatch,
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop d(loss)/dz through the block.

    Accumulates parameter gradients into ``grads`` and returns gradients for
    the text-embedding slot and the free-vector slot.  The centroid slot's
    gradient is computed and discarded: centroids move by EMA, not by SGD.
    """
    z = batch.z
    if upstream.shape != z.shape:
        raise PrototypeError(f"upstream shape {upstream.shape} does not match output {z.shape}")
    n, d = z.shape
    radial = np.einsum("nd,nd->n", upstream, z, optimize=False)
    d_pooled = (upstream - radial[:, None] * z) / batch.pooled_norms[:, None]
    dx3 = np.repeat(d_pooled[:, None, :] / 3.0, 3, axis=1)

    d_ffn_out_branch = dx3 if batch.mask2 is None else dx3 * batch.mask2
    db = dx3.copy()
    flat_act = batch.ffn_act.reshape(-1, params.d_ffn)
    flat_dout = d_ffn_out_branch.reshape(-1, d)
    grads.ffn_out += flat_act.T @ flat_dout
    grads.ffn_out_bias += flat_dout.sum(axis=0)
    d_act = d_ffn_out_branch @ params.ffn_out.T
    d_pre = d_act * _gelu_grad(batch.ffn_pre)
    ln2_out = batch.ln2_xhat * params.ln2_gain + params.ln2_bias
    grads.ffn_in += ln2_out.reshape(-1, d).T @ d_pre.reshape(-1, params.d_ffn)
    grads.ffn_in_bias += d_pre.reshape(-1, params.d_ffn).sum(axis=0)
    db += d_pre @ params.ffn_in.T

    dx2 = _layernorm_backward(db, batch.ln2_xhat, batch.ln2_inv_std,
                              params.ln2_gain, grads.ln2_gain, grads.ln2_bias)

    da = dx2.copy()
    d_attn_out = dx2 if batch.mask1 is None else dx2 * batch.mask1
    grads.w_o += batch.attn_ctx.reshape(-1, d).T @ d_attn_out.reshape(-1, d)
    d_ctx = d_attn_out @ params.w_o.T
    d_weights = np.einsum("nte,nse->nts", d_ctx, batch.attn_v, optimize=True)
    d_v = np.einsum("nts,nte->nse", batch.attn_weights, d_ctx, optimize=True)
    w = batch.attn_weights
    d_scores = w * (d_weights - np.einsum("nts,nts->nt", d_weights, w, optimize=True)[..., None])
    inv_sqrt_d = 1.0 / math.sqrt(d)
    d_q = np.einsum("nts,nse->nte", d_scores, batch.attn_k, optimize=True) * inv_sqrt_d
    d_k = np.einsum("nts,nte->nse", d_scores, batch.attn_q, optimize=True) * inv_sqrt_d

    a = batch.ln1_xhat * params.ln1_gain + params.ln1_bias
    flat_a = a.reshape(-1, d)
    grads.w_q += flat_a.T @ d_q.reshape(-1, d)
    grads.w_k += flat_a.T @ d_k.reshape(-1, d)
    grads.w_v += flat_a.T @ d_v.reshape(-1, d)
    da += d_q @ params.w_q.T + d_k @ params.w_k.T + d_v @ params.w_v.T

    dx = _layernorm_backward(da, batch.ln1_xhat, batch.ln1_inv_std,
                             params.ln1_gain, grads.ln1_gain, grads.ln1_bias)
    return dx[:, 0, :], dx[:, 2, :]


@dataclass
class CentroidStore:
    """Per-label EMA centroids of query embeddings, kept unit-norm once touched."""

    centroids: np.ndarray
    alpha: float
    touched: np.ndarray

    @classmethod
    def init_from(cls, label_embeddings: np.ndarray, alpha: float) -> "CentroidStore":
        if not (0.0 <= alpha < 1.0):
            raise ValueError(f"alpha must be in [0, 1), got {alpha}")
        return cls(
            centroids=np.array(label_embeddings, dtype=np.float64, copy=True),
            alpha=alpha,
            touched=np.zeros(label_embeddings.shape[0], dtype=np.int64),
        )

    def update(self, label: int, query_vec: np.ndarray) -> None:
        """c <- normalize(alpha * c + (1 - alpha) * h_q); no gradient flows here."""
        c = self.alpha * self.centroids[label] + (1.0 - self.alpha) * query_vec
        norm = np.linalg.norm(c)
        if norm < _NORM_FLOOR:
            raise PrototypeError(f"centroid collapse for label {label}")
        self.centroids[label] = c / norm
        self.touched[label] += 1

    def batch_update(self, pool: np.ndarray, membership: np.ndarray, query_vecs: np.ndarray) -> None:
        """Apply updates for all (query, pool label) relevant pairs, query-major."""
        rows, cols = np.nonzero(membership)
        for i, k in zip(rows, cols):
            self.update(int(pool[k]), query_vecs[i])

    def refresh_untouched(self, label_embeddings: np.ndarray) -> None:
        cold = self.touched == 0
        self.centroids[cold] = label_embeddings[cold]


@dataclass
class FreeVectorBank:
    """M raw free vectors shared by clusters of labels; unit-normalized on read."""

    vectors: np.ndarray     # (M, d) raw, never normalized in storage
    assignment: np.ndarray  # (L,) bank row per label, fixed at init
    grad: np.ndarray

    @classmethod
    def initialize(cls, label_embeddings: np.ndarray, bank_size: int, dim: int, seed: int) -> "FreeVectorBank":
        assignment = cluster_labels(label_embeddings, bank_size, seed)
        # Warm-start each shared vector at the mean of its labels' initial
        # embeddings so prototypes open aligned with the label texts; a random
        # bank slot would dilute every prototype with an unrelated direction.
        raw = np.zeros((bank_size, dim))
        counts = np.zeros(bank_size)
        np.add.at(raw, assignment, label_embeddings)
        np.add.at(counts, assignment, 1.0)
        occupied = counts > 0
        raw[occupied] /= counts[occupied, None]
        if not np.all(occupied):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA]))
            raw[~occupied] = rng.standard_normal((int((~occupied).sum()), dim))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        return cls(vectors=raw, assignment=assignment, grad=np.zeros_like(raw))

    @property
    def size(self) -> int:
        return int(self.vectors.shape[0])

    def gather(self, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unit-norm vector per label plus (raw norms, bank rows) for backward."""
        rows = self.assignment[labels]
        raw = self.vectors[rows]
        norms = np.linalg.norm(raw, axis=1)
        if np.any(norms < _NORM_FLOOR):
            bad = int(rows[np.argmin(norms)])
            raise PrototypeError(f"free vector {bad} has collapsed to zero norm")
        return raw / norms[:, None], norms, rows

    def accumulate_grad(self, labels: np.ndarray, d_unit: np.ndarray) -> None:
        """Scatter gradients wrt the unit vectors back to raw bank rows.

        Labels sharing a row sum their contributions; the normalization
        Jacobian is applied against the raw stored values.
        """
        unit, norms, rows = self.gather(labels)
        radial = np.einsum("nd,nd->n", d_unit, unit, optimize=False)
        d_raw = (d_unit - radial[:, None] * unit) / norms[:, None]
        np.add.at(self.grad, rows, d_raw)


def materialize_all_prototypes(
    params: PrototypeNetParams,
    encoder_params,
    corpus,
    centroids: CentroidStore,
    bank: FreeVectorBank,
    batch_size: int = 1024,
    threads: int = 1,
) -> np.ndarray:
    """Eval-mode prototypes for every label in the corpus, in label order.

    Rows are computed in shards; shard boundaries and thread count cannot
    change any output bit because every forward contraction is row-local.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .encoder import encode_forward, tokenize

    n = corpus.num_labels
    out = np.empty((n, params.dim))
    seqs = [tokenize(t, encoder_params.vocab_size, encoder_params.t_max) for t in corpus.label_texts]

    def work(start: int) -> None:
        stop = min(start + batch_size, n)
        idx = np.arange(start, stop)
        h = encode_forward(encoder_params, [seqs[i] for i in idx]).vectors
        c = centroids.centroids[idx]
        v, _, _ = bank.gather(idx)
        out[start:stop] = prototype_forward(params, h, c, v, train_mode=False).z

    starts = list(range(0, n, batch_size))
    if threads <= 1 or len(starts) <= 1:
        for s in starts:
            work(s)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, starts))
    return out
