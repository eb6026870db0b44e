"""Model bundle: encoder + prototype block + centroid store + free-vector bank.

Also defines the optimizer's view of the model: a flat list of named
parameter groups with paired gradient buffers and a weight-decay flag.
Biases, layernorm parameters, and the free-vector bank are exempt from decay.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .corpus import Corpus
from .encoder import EncoderGrads, EncoderParams, encode_forward, tokenize
from .prototype_net import (
    CentroidStore,
    FreeVectorBank,
    PrototypeNetGrads,
    PrototypeNetParams,
)


class ParamGroup(NamedTuple):
    name: str
    value: np.ndarray
    grad: np.ndarray
    decay: bool


@dataclass
class PrimeModel:
    encoder: EncoderParams
    encoder_grads: EncoderGrads
    proto: PrototypeNetParams
    proto_grads: PrototypeNetGrads
    centroids: CentroidStore
    bank: FreeVectorBank

    def zero_grads(self) -> None:
        self.encoder_grads.zero_()
        self.proto_grads.zero_()
        self.bank.grad.fill(0.0)


def named_parameters(model: PrimeModel) -> list[ParamGroup]:
    enc, eg = model.encoder, model.encoder_grads
    pro, pg = model.proto, model.proto_grads
    groups = [
        ParamGroup("encoder.token_table", enc.token_table, eg.token_table, True),
        ParamGroup("encoder.proj", enc.proj, eg.proj, True),
        ParamGroup("encoder.proj_bias", enc.proj_bias, eg.proj_bias, False),
        ParamGroup("proto.w_q", pro.w_q, pg.w_q, True),
        ParamGroup("proto.w_k", pro.w_k, pg.w_k, True),
        ParamGroup("proto.w_v", pro.w_v, pg.w_v, True),
        ParamGroup("proto.w_o", pro.w_o, pg.w_o, True),
        ParamGroup("proto.ffn_in", pro.ffn_in, pg.ffn_in, True),
        ParamGroup("proto.ffn_in_bias", pro.ffn_in_bias, pg.ffn_in_bias, False),
        ParamGroup("proto.ffn_out", pro.ffn_out, pg.ffn_out, True),
        ParamGroup("proto.ffn_out_bias", pro.ffn_out_bias, pg.ffn_out_bias, False),
        ParamGroup("proto.ln1_gain", pro.ln1_gain, pg.ln1_gain, False),
        ParamGroup("proto.ln1_bias", pro.ln1_bias, pg.ln1_bias, False),
        ParamGroup("proto.ln2_gain", pro.ln2_gain, pg.ln2_gain, False),
        ParamGroup("proto.ln2_bias", pro.ln2_bias, pg.ln2_bias, False),
        ParamGroup("bank.vectors", model.bank.vectors, model.bank.grad, False),
    ]
    return groups


def initialize_model(
    corpus: Corpus,
    dim: int,
    vocab_size: int,
    t_max: int,
    d_ffn: int,
    dropout: float,
    alpha: float,
    bank_size: int,
    seed: int,
) -> PrimeModel:
    """Build a fresh model; bank assignment and centroid init come from the
    initial label-text embeddings and are not refreshed by training."""
    if bank_size > corpus.num_labels:
        raise ValueError(
            f"bank_size {bank_size} exceeds number of labels {corpus.num_labels}"
        )
    ss = np.random.SeedSequence([seed, 0x1717])
    enc_seed, proto_seed, bank_seed = ss.spawn(3)
    encoder = EncoderParams.initialize(dim, vocab_size, t_max, np.random.default_rng(enc_seed))
    proto = PrototypeNetParams.initialize(dim, d_ffn, dropout, np.random.default_rng(proto_seed))
    label_seqs = [tokenize(t, vocab_size, t_max) for t in corpus.label_texts]
    label_emb = encode_forward(encoder, label_seqs).vectors
    bank_seed_int = int(bank_seed.generate_state(1, dtype=np.uint32)[0])
    bank = FreeVectorBank.initialize(label_emb, bank_size, dim, bank_seed_int)
    centroids = CentroidStore.init_from(label_emb, alpha)
    return PrimeModel(
        encoder=encoder,
        encoder_grads=EncoderGrads.zeros(encoder),
        proto=proto,
        proto_grads=PrototypeNetGrads.zeros(proto),
        centroids=centroids,
        bank=bank,
    )
