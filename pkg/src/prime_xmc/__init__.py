"""Prototype-based extreme multi-label retrieval engine."""

from .corpus import Corpus, CorpusError, PropensityTable, compute_propensities, ingest
from .encoder import EncoderError, EncoderParams, encode_texts
from .losses import (
    MarginConfig,
    Region,
    batch_triplet_loss,
    triplet_clipped_dynamic,
    triplet_fixed,
)
from .metrics import EvalResult, evaluate
from .model import PrimeModel, initialize_model
from .prototype_net import PrototypeNetParams, prototype_forward
from .retrieval import build_index, topk, topk_batch
from .trainer import NumericalAbort, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "CorpusError",
    "EncoderError",
    "EncoderParams",
    "EvalResult",
    "MarginConfig",
    "NumericalAbort",
    "PrimeModel",
    "PropensityTable",
    "PrototypeNetParams",
    "Region",
    "TrainConfig",
    "batch_triplet_loss",
    "build_index",
    "compute_propensities",
    "encode_texts",
    "evaluate",
    "ingest",
    "initialize_model",
    "prototype_forward",
    "topk",
    "topk_batch",
    "train",
    "triplet_clipped_dynamic",
    "triplet_fixed",
    "__version__",
]
