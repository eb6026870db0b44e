"""Triplet loss kernels, batched loss, prototype regularizer, combined objective.

Two scalar kernels share one result type: a fixed-margin hinge baseline and a
dynamic-margin variant whose margin is the similarity gap itself, clipped to
[gamma_min, gamma_max].  The dynamic kernel has three gradient regions:

  easy       s_qp > s_qn and (s_qp - s_qn) >= gamma_min   -> value 0, grads (0, 0)
  uncertain  s_qp > s_qn and (s_qp - s_qn) <  gamma_min   -> value (s_qp - s_qn) + gamma_min, grads (+1, -1)
  hard       s_qp <= s_qn                                 -> value (s_qn - s_qp) + clip(s_qn - s_qp), grads (-1, +1)

The clip term in the hard region contributes value only, never gradient.  In
the uncertain region the gradient deliberately points opposite the usual
hinge direction: near-miss positives are treated as probable missing labels
and pushed no further than gamma_min away.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class LossError(ValueError):
    """Invalid loss inputs (overlapping masks, label leakage, bad shapes)."""


class Region(IntEnum):
    EASY = 0
    UNCERTAIN = 1
    HARD = 2


REGION_NAMES = ("easy", "uncertain", "hard")


@dataclass(frozen=True)
class MarginConfig:
    """Margin band, baseline margin, regularizer margin, regularizer weight."""

    gamma_min: float = 0.1
    gamma_max: float = 0.3
    fixed_margin: float = 0.3
    reg_margin: float = 0.0
    lam: float = 0.1

    def __post_init__(self) -> None:
        if not (0.0 <= self.gamma_min <= self.gamma_max < 2.0):
            raise ValueError(
                f"require 0 <= gamma_min <= gamma_max < 2, got ({self.gamma_min}, {self.gamma_max})"
            )
        if not (0.0 <= self.fixed_margin < 2.0):
            raise ValueError(f"fixed_margin must be in [0, 2), got {self.fixed_margin}")
        if self.lam < 0.0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class TripletGrad:
    """Scalar kernel output: loss value, gradients wrt (s_qp, s_qn), region tag."""

    loss: float
    d_sap: float
    d_san: float
    region: Region


def clip_band(x: float, gamma_min: float, gamma_max: float) -> float:
    if x < gamma_min:
        return gamma_min
    if x > gamma_max:
        return gamma_max
    return x


def triplet_fixed(s_qp: float, s_qn: float, margin: float) -> TripletGrad:
    """Hinge baseline max(s_qn - s_qp + margin, 0); active at the boundary."""
    gap = s_qp - s_qn
    if gap <= margin:
        return TripletGrad(loss=s_qn - s_qp + margin, d_sap=-1.0, d_san=1.0, region=Region.HARD)
    return TripletGrad(loss=0.0, d_sap=0.0, d_san=0.0, region=Region.EASY)


def triplet_clipped_dynamic(s_qp: float, s_qn: float, cfg: MarginConfig) -> TripletGrad:
    """Dynamic-margin kernel; see module docstring for the three regions."""
    gap = s_qp - s_qn
    if gap > 0.0:
        if gap >= cfg.gamma_min:
            return TripletGrad(loss=0.0, d_sap=0.0, d_san=0.0, region=Region.EASY)
        return TripletGrad(loss=gap + cfg.gamma_min, d_sap=1.0, d_san=-1.0, region=Region.UNCERTAIN)
    rev = -gap
    value = rev + clip_band(rev, cfg.gamma_min, cfg.gamma_max)
    return TripletGrad(loss=value, d_sap=-1.0, d_san=1.0, region=Region.HARD)


@dataclass
class BatchTripletResult:
    loss: float
    grad_pos: np.ndarray      # (A, P)
    grad_neg: np.ndarray      # (A, N)
    region_counts: np.ndarray  # (3,) int64 over valid triplets
    num_triplets: int


def _check_leakage(
    pos_mask: np.ndarray,
    neg_mask: np.ndarray,
    pos_ids: np.ndarray | None,
    neg_ids: np.ndarray | None,
) -> None:
    if pos_ids is None or neg_ids is None:
        return
    pos_ids = np.asarray(pos_ids)
    neg_ids = np.asarray(neg_ids)
    if neg_ids.ndim == 1:
        neg_ids = np.broadcast_to(neg_ids, (pos_mask.shape[0], neg_ids.shape[0]))
    same = pos_ids[:, :, None] == neg_ids[:, None, :]
    bad = same & pos_mask[:, :, None] & neg_mask[:, None, :]
    if np.any(bad):
        a, j, k = (int(x[0]) for x in np.nonzero(bad))
        raise LossError(f"label leakage: anchor {a} has id {int(pos_ids[a, j])} as both positive and negative")


def batch_triplet_loss(
    sim_pos: np.ndarray,
    sim_neg: np.ndarray,
    pos_mask: np.ndarray,
    neg_mask: np.ndarray,
    cfg: MarginConfig,
    mode: str = "dynamic",
    pos_ids: np.ndarray | None = None,
    neg_ids: np.ndarray | None = None,
) -> BatchTripletResult:
    """Mean triplet loss over all valid (anchor, positive, negative) combos.

    Gradients are returned per similarity entry, already divided by the
    number of valid triplets.  With zero valid triplets everything is zero.
    """
    sim_pos = np.asarray(sim_pos, dtype=np.float64)
    sim_neg = np.asarray(sim_neg, dtype=np.float64)
    pos_mask = np.asarray(pos_mask, dtype=bool)
    neg_mask = np.asarray(neg_mask, dtype=bool)
    if sim_pos.shape != pos_mask.shape or sim_neg.shape != neg_mask.shape:
        raise LossError("similarity/mask shape mismatch")
    if sim_pos.shape[0] != sim_neg.shape[0]:
        raise LossError("anchor dimension mismatch between positives and negatives")
    if mode not in ("dynamic", "fixed"):
        raise LossError(f"unknown loss mode {mode!r}")
    _check_leakage(pos_mask, neg_mask, pos_ids, neg_ids)

    valid = pos_mask[:, :, None] & neg_mask[:, None, :]
    num = int(valid.sum())
    counts = np.zeros(3, dtype=np.int64)
    if num == 0:
        return BatchTripletResult(
            loss=0.0,
            grad_pos=np.zeros_like(sim_pos),
            grad_neg=np.zeros_like(sim_neg),
            region_counts=counts,
            num_triplets=0,
        )
    gap = sim_pos[:, :, None] - sim_neg[:, None, :]
    if mode == "fixed":
        hard = (gap <= cfg.fixed_margin) & valid
        easy = valid & ~hard
        values = np.where(hard, -gap + cfg.fixed_margin, 0.0)
        gp = np.where(hard, -1.0, 0.0)
        gn = np.where(hard, 1.0, 0.0)
        counts[Region.EASY] = easy.sum()
        counts[Region.HARD] = hard.sum()
    else:
        easy = (gap > 0.0) & (gap >= cfg.gamma_min) & valid
        uncertain = (gap > 0.0) & (gap < cfg.gamma_min) & valid
        hard = (gap <= 0.0) & valid
        rev = -gap
        clipped = np.clip(rev, cfg.gamma_min, cfg.gamma_max)
        values = np.where(uncertain, gap + cfg.gamma_min, 0.0)
        values = np.where(hard, rev + clipped, values)
        gp = np.where(uncertain, 1.0, 0.0) + np.where(hard, -1.0, 0.0)
        gn = np.where(uncertain, -1.0, 0.0) + np.where(hard, 1.0, 0.0)
        counts[Region.EASY] = easy.sum()
        counts[Region.UNCERTAIN] = uncertain.sum()
        counts[Region.HARD] = hard.sum()
    total = float(values[valid].sum()) / num
    vf = valid.astype(np.float64)
    grad_pos = (gp * vf).sum(axis=2) / num
    grad_neg = (gn * vf).sum(axis=1) / num
    return BatchTripletResult(
        loss=total, grad_pos=grad_pos, grad_neg=grad_neg, region_counts=counts, num_triplets=num
    )


@dataclass
class RegularizerResult:
    value: float
    grad_text: np.ndarray   # d(value)/d(text sims)
    grad_proto: np.ndarray  # d(value)/d(prototype sims)
    num_pos: int
    num_neg: int


def prototype_regularizer(
    text_sims: np.ndarray,
    proto_sims: np.ndarray,
    pos_mask: np.ndarray,
    neg_mask: np.ndarray,
    reg_margin: float,
) -> RegularizerResult:
    """Hinge deviation between prototype-route and text-route similarities.

    Positive pairs penalize max(s - b + m', 0); negative pairs penalize
    max(b - s + m', 0); each half is averaged over its own pair count and the
    two halves are averaged together.  Activation is strict (> 0), so a pair
    sitting exactly at the margin contributes neither value nor gradient.
    """
    text_sims = np.asarray(text_sims, dtype=np.float64)
    proto_sims = np.asarray(proto_sims, dtype=np.float64)
    pos_mask = np.asarray(pos_mask, dtype=bool)
    neg_mask = np.asarray(neg_mask, dtype=bool)
    if text_sims.shape != proto_sims.shape or text_sims.shape != pos_mask.shape:
        raise LossError("regularizer input shapes must all match")
    if np.any(pos_mask & neg_mask):
        raise LossError("regularizer masks must be disjoint")
    grad_text = np.zeros_like(text_sims)
    grad_proto = np.zeros_like(proto_sims)
    num_pos = int(pos_mask.sum())
    num_neg = int(neg_mask.sum())
    r_pos = 0.0
    if num_pos > 0:
        terms = text_sims - proto_sims + reg_margin
        active = pos_mask & (terms > 0.0)
        r_pos = float(terms[active].sum()) / num_pos
        grad_text[active] += 1.0 / (2.0 * num_pos)
        grad_proto[active] -= 1.0 / (2.0 * num_pos)
    r_neg = 0.0
    if num_neg > 0:
        terms = proto_sims - text_sims + reg_margin
        active = neg_mask & (terms > 0.0)
        r_neg = float(terms[active].sum()) / num_neg
        grad_proto[active] += 1.0 / (2.0 * num_neg)
        grad_text[active] -= 1.0 / (2.0 * num_neg)
    return RegularizerResult(
        value=0.5 * (r_pos + r_neg),
        grad_text=grad_text,
        grad_proto=grad_proto,
        num_pos=num_pos,
        num_neg=num_neg,
    )


@dataclass
class TripletView:
    """One anchor direction of the batched loss: sims plus validity masks."""

    sim_pos: np.ndarray
    sim_neg: np.ndarray
    pos_mask: np.ndarray
    neg_mask: np.ndarray
    pos_ids: np.ndarray | None = None
    neg_ids: np.ndarray | None = None


@dataclass
class RegularizerInputs:
    text_sims: np.ndarray
    proto_sims: np.ndarray
    pos_mask: np.ndarray
    neg_mask: np.ndarray


TERM_NAMES = ("q2p", "q2l", "l2q")


@dataclass
class LossReport:
    """Serializable per-step summary of the combined objective."""

    step: int
    total: float
    q2p: float
    q2l: float
    l2q: float
    reg: float
    lam: float
    gamma_min: float
    gamma_max: float
    mode: str
    region_counts: np.ndarray
    num_triplets: int
    epoch: int = 0
    pool_size: int = 0

    def to_json_line(self) -> str:
        payload = {
            "step": self.step,
            "epoch": self.epoch,
            "total": self.total,
            "q2p": self.q2p,
            "q2l": self.q2l,
            "l2q": self.l2q,
            "reg": self.reg,
            "lambda": self.lam,
            "gamma_min": self.gamma_min,
            "gamma_max": self.gamma_max,
            "mode": self.mode,
            "regions": {name: int(self.region_counts[i]) for i, name in enumerate(REGION_NAMES)},
            "num_triplets": self.num_triplets,
            "pool_size": self.pool_size,
        }
        return json.dumps(payload, separators=(",", ":"))


@dataclass
class CombinedLossResult:
    report: LossReport
    term_grads: dict[str, tuple[np.ndarray, np.ndarray]]
    reg_grad_text: np.ndarray | None
    reg_grad_proto: np.ndarray | None


def combined_loss(
    q2p: TripletView | None,
    q2l: TripletView | None,
    l2q: TripletView | None,
    reg: RegularizerInputs | None,
    cfg: MarginConfig,
    mode: str = "dynamic",
    step: int = 0,
) -> CombinedLossResult:
    """Sum the three anchored triplet terms plus lam * regularizer.

    Disabled terms are passed as None and contribute nothing.  Regularizer
    gradients are returned pre-multiplied by lam.
    """
    views = {"q2p": q2p, "q2l": q2l, "l2q": l2q}
    term_values = {}
    term_grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    counts = np.zeros(3, dtype=np.int64)
    num_triplets = 0
    total = 0.0
    for name in TERM_NAMES:
        view = views[name]
        if view is None:
            term_values[name] = 0.0
            continue
        res = batch_triplet_loss(
            view.sim_pos, view.sim_neg, view.pos_mask, view.neg_mask,
            cfg, mode=mode, pos_ids=view.pos_ids, neg_ids=view.neg_ids,
        )
        term_values[name] = res.loss
        term_grads[name] = (res.grad_pos, res.grad_neg)
        counts += res.region_counts
        num_triplets += res.num_triplets
        total += res.loss
    reg_value = 0.0
    reg_grad_text = reg_grad_proto = None
    if reg is not None and cfg.lam > 0.0:
        rr = prototype_regularizer(reg.text_sims, reg.proto_sims, reg.pos_mask, reg.neg_mask, cfg.reg_margin)
        reg_value = rr.value
        reg_grad_text = cfg.lam * rr.grad_text
        reg_grad_proto = cfg.lam * rr.grad_proto
        total += cfg.lam * reg_value
    report = LossReport(
        step=step,
        total=total,
        q2p=term_values["q2p"],
        q2l=term_values["q2l"],
        l2q=term_values["l2q"],
        reg=reg_value,
        lam=cfg.lam,
        gamma_min=cfg.gamma_min,
        gamma_max=cfg.gamma_max,
        mode=mode,
        region_counts=counts,
        num_triplets=num_triplets,
    )
    return CombinedLossResult(
        report=report,
        term_grads=term_grads,
        reg_grad_text=reg_grad_text,
        reg_grad_proto=reg_grad_proto,
    )
