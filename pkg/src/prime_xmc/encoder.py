"""Hashed bag-of-tokens text encoder with a hand-written backward pass.

Text is lowercased, split on non-alphanumeric runs, and each token is hashed
with 64-bit FNV-1a modulo the vocabulary size.  A row embedding is the mean
of the token-table rows, passed through a square projection plus bias, then
L2-normalized.  Forward passes avoid BLAS (np.einsum with optimize=False) so
a row's output never depends on what else is in the batch.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
_NORM_FLOOR = 1e-12


class EncoderError(ValueError):
    """Degenerate encoder state (zero-norm embedding, shape mismatch)."""


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def tokenize(text: str, vocab_size: int, t_max: int) -> np.ndarray:
    """Hash a text into at most ``t_max`` token ids in [0, vocab_size).

    Empty text (no alphanumeric runs) maps to the single reserved id 0.
    Pure function of its arguments; identical calls return identical arrays.
    """
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    if vocab_size < 1:
        raise ValueError(f"vocab_size must be >= 1, got {vocab_size}")
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        return np.zeros(1, dtype=np.int64)
    ids = [fnv1a_64(tok.encode("utf-8")) % vocab_size for tok in tokens[:t_max]]
    return np.asarray(ids, dtype=np.int64)


@dataclass
class EncoderParams:
    token_table: np.ndarray  # (V, d)
    proj: np.ndarray         # (d, d), applied as x @ proj
    proj_bias: np.ndarray    # (d,)
    dim: int
    vocab_size: int
    t_max: int

    @classmethod
    def initialize(cls, dim: int, vocab_size: int, t_max: int, rng: np.random.Generator) -> "EncoderParams":
        scale = 1.0 / np.sqrt(dim)
        table = rng.uniform(-scale, scale, size=(vocab_size, dim))
        proj = np.eye(dim) + rng.uniform(-0.01, 0.01, size=(dim, dim))
        return cls(
            token_table=table,
            proj=proj,
            proj_bias=np.zeros(dim),
            dim=dim,
            vocab_size=vocab_size,
            t_max=t_max,
        )


@dataclass
class EncoderGrads:
    token_table: np.ndarray
    proj: np.ndarray
    proj_bias: np.ndarray

    @classmethod
    def zeros(cls, params: EncoderParams) -> "EncoderGrads":
        return cls(
            token_table=np.zeros_like(params.token_table),
            proj=np.zeros_like(params.proj),
            proj_bias=np.zeros_like(params.proj_bias),
        )

    def zero_(self) -> None:
        self.token_table.fill(0.0)
        self.proj.fill(0.0)
        self.proj_bias.fill(0.0)


@dataclass
class EmbeddingBatch:
    """Encoder output plus the caches the backward pass needs."""

    vectors: np.ndarray            # (B, d) unit rows
    norms: np.ndarray              # (B,) pre-normalization norms
    token_ids: list[np.ndarray]
    pooled: np.ndarray             # (B, d) mean-pooled table rows


def encode_forward(params: EncoderParams, token_seqs: list[np.ndarray]) -> EmbeddingBatch:
    """Embed token sequences into unit-norm rows.

    Raises EncoderError when a row's pre-normalization norm falls below 1e-12.
    """
    n = len(token_seqs)
    if n == 0:
        d = params.dim
        empty = np.zeros((0, d))
        return EmbeddingBatch(vectors=empty, norms=np.zeros(0), token_ids=[], pooled=empty.copy())
    lengths = np.array([len(seq) for seq in token_seqs], dtype=np.int64)
    if np.any(lengths == 0):
        raise EncoderError("empty token sequence; tokenize() guarantees at least one id")
    flat = np.concatenate(token_seqs)
    if flat.min() < 0 or flat.max() >= params.vocab_size:
        raise EncoderError("token id outside [0, vocab_size)")
    offsets = np.zeros(n, dtype=np.int64)
    np.cumsum(lengths[:-1], out=offsets[1:])
    sums = np.add.reduceat(params.token_table[flat], offsets, axis=0)
    pooled = sums / lengths[:, None]
    u = np.einsum("bd,de->be", pooled, params.proj, optimize=False) + params.proj_bias
    norms = np.sqrt(np.einsum("bd,bd->b", u, u, optimize=False))
    if np.any(norms < _NORM_FLOOR):
        row = int(np.argmin(norms))
        raise EncoderError(f"degenerate embedding: row {row} has norm {norms[row]:.3e}")
    vectors = u / norms[:, None]
    return EmbeddingBatch(vectors=vectors, norms=norms, token_ids=list(token_seqs), pooled=pooled)


def encode_backward(
    params: EncoderParams,
    grads: EncoderGrads,
    batch: EmbeddingBatch,
    upstream: np.ndarray,
) -> None:
    """Accumulate parameter gradients for d(loss)/d(vectors) = upstream.

    The normalization Jacobian (I - h h^T)/||u|| is applied first, so any
    upstream component parallel to the output row is annihilated.
    """
    if upstream.shape != batch.vectors.shape:
        raise EncoderError(
            f"upstream shape {upstream.shape} does not match batch shape {batch.vectors.shape}"
        )
    if upstream.shape[0] == 0:
        return
    h = batch.vectors
    radial = np.einsum("bd,bd->b", upstream, h, optimize=False)
    d_u = (upstream - radial[:, None] * h) / batch.norms[:, None]
    grads.proj_bias += d_u.sum(axis=0)
    grads.proj += batch.pooled.T @ d_u
    d_pooled = d_u @ params.proj.T
    lengths = np.array([len(seq) for seq in batch.token_ids], dtype=np.int64)
    flat = np.concatenate(batch.token_ids)
    per_token = np.repeat(d_pooled / lengths[:, None], lengths, axis=0)
    np.add.at(grads.token_table, flat, per_token)


def encode_texts(params: EncoderParams, texts: list[str]) -> EmbeddingBatch:
    """Tokenize and embed raw texts in one call (inference convenience)."""
    seqs = [tokenize(t, params.vocab_size, params.t_max) for t in texts]
    return encode_forward(params, seqs)
