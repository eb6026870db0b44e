"""Independent reference implementations the tests compare against.

Everything here is deliberately written as plain loops and scalar math,
duplicating none of the package's vectorized code paths.  Tolerances in the
tests are meaningful only because these stay naive.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------- gradients

def finite_difference(f, arrays: list[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of scalar f() wrt each array, in place.

    ``f`` takes no arguments and reads the arrays; each entry is wiggled by
    +-eps and restored.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.shape[0]):
            keep = flat[i]
            flat[i] = keep + eps
            hi = f()
            flat[i] = keep - eps
            lo = f()
            flat[i] = keep
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


# ------------------------------------------------------------ loss kernels

def ref_fixed(sp: float, sn: float, m: float):
    """(loss, d_sap, d_san, region_name) for the hinge baseline."""
    if sp - sn <= m:
        return sn - sp + m, -1.0, 1.0, "hard"
    return 0.0, 0.0, 0.0, "easy"


def ref_dynamic(sp: float, sn: float, gmin: float, gmax: float):
    """(loss, d_sap, d_san, region_name) for the dynamic-margin kernel."""
    if sp > sn:
        gap = sp - sn
        if gap >= gmin:
            return 0.0, 0.0, 0.0, "easy"
        return gap + gmin, 1.0, -1.0, "uncertain"
    rev = sn - sp
    clipped = min(max(rev, gmin), gmax)
    return rev + clipped, -1.0, 1.0, "hard"


def ref_batch_loss(sim_pos, sim_neg, pos_mask, neg_mask, gmin, gmax, fixed_m, mode):
    """Triple-loop batched triplet loss: (mean loss, grad_pos, grad_neg, counts)."""
    a_n, p_n = sim_pos.shape
    _, n_n = sim_neg.shape
    grad_pos = np.zeros((a_n, p_n))
    grad_neg = np.zeros((a_n, n_n))
    counts = {"easy": 0, "uncertain": 0, "hard": 0}
    total = 0.0
    num = 0
    for a in range(a_n):
        for j in range(p_n):
            if not pos_mask[a, j]:
                continue
            for k in range(n_n):
                if not neg_mask[a, k]:
                    continue
                if mode == "fixed":
                    loss, gp, gn, region = ref_fixed(sim_pos[a, j], sim_neg[a, k], fixed_m)
                else:
                    loss, gp, gn, region = ref_dynamic(sim_pos[a, j], sim_neg[a, k], gmin, gmax)
                total += loss
                grad_pos[a, j] += gp
                grad_neg[a, k] += gn
                counts[region] += 1
                num += 1
    if num == 0:
        return 0.0, grad_pos, grad_neg, counts, 0
    return total / num, grad_pos / num, grad_neg / num, counts, num


def ref_regularizer(text_sims, proto_sims, pos_mask, neg_mask, m_prime):
    """Loop regularizer: (value, grad_text, grad_proto)."""
    grad_text = np.zeros_like(text_sims, dtype=np.float64)
    grad_proto = np.zeros_like(proto_sims, dtype=np.float64)
    pos_pairs = [(i, j) for i in range(pos_mask.shape[0]) for j in range(pos_mask.shape[1]) if pos_mask[i, j]]
    neg_pairs = [(i, j) for i in range(neg_mask.shape[0]) for j in range(neg_mask.shape[1]) if neg_mask[i, j]]
    r_pos = 0.0
    for i, j in pos_pairs:
        term = text_sims[i, j] - proto_sims[i, j] + m_prime
        if term > 0:
            r_pos += term
            grad_text[i, j] += 1.0 / (2 * len(pos_pairs))
            grad_proto[i, j] -= 1.0 / (2 * len(pos_pairs))
    if pos_pairs:
        r_pos /= len(pos_pairs)
    r_neg = 0.0
    for i, j in neg_pairs:
        term = proto_sims[i, j] - text_sims[i, j] + m_prime
        if term > 0:
            r_neg += term
            grad_proto[i, j] += 1.0 / (2 * len(neg_pairs))
            grad_text[i, j] -= 1.0 / (2 * len(neg_pairs))
    if neg_pairs:
        r_neg /= len(neg_pairs)
    return 0.5 * (r_pos + r_neg), grad_text, grad_proto


# ------------------------------------------------------------- propensities

def ref_propensity(n_l: float, num_queries: int, a: float, b: float) -> float:
    c = (math.log(num_queries) - 1.0) * (b + 1.0) ** a
    return 1.0 / (1.0 + c * math.exp(-a * math.log(n_l + b)))


# ------------------------------------------------------------------ metrics

def ref_precision(predicted, truth_sets, k):
    total, n = 0.0, 0
    for i, truth in enumerate(truth_sets):
        if not truth:
            continue
        hits = sum(1 for c in predicted[i][:k] if c in truth)
        total += hits / k
        n += 1
    return total / n if n else 0.0


def ref_recall(predicted, truth_sets, k):
    total, n = 0.0, 0
    for i, truth in enumerate(truth_sets):
        if not truth:
            continue
        hits = sum(1 for c in predicted[i][:k] if c in truth)
        total += hits / len(truth)
        n += 1
    return total / n if n else 0.0


def ref_psp(predicted, truth_sets, p_vec, k):
    num = den = 0.0
    for i, truth in enumerate(truth_sets):
        if not truth:
            continue
        sp = sum(1.0 / p_vec[c] for c in predicted[i][:k] if c in truth) / k
        ideal_labels = sorted(truth, key=lambda c: (-1.0 / p_vec[c], c))[:k]
        ideal = sum(1.0 / p_vec[c] for c in ideal_labels) / k
        num += sp
        den += ideal
    return num / den if den > 0 else 0.0


def ref_topk(matrix, query, k):
    """Full-sort top-k columns: descending score, ties by ascending index."""
    scores = [float(np.dot(matrix[c], query)) for c in range(matrix.shape[0])]
    order = sorted(range(len(scores)), key=lambda c: (-scores[c], c))
    return order[:k]


# ---------------------------------------------------------------- encoders

def ref_encode(token_table, proj, proj_bias, token_seqs):
    """Per-row scripted forward: mean rows, affine, L2-normalize."""
    out = []
    for seq in token_seqs:
        acc = np.zeros(token_table.shape[1])
        for t in seq:
            acc = acc + token_table[int(t)]
        pooled = acc / len(seq)
        u = pooled @ proj + proj_bias
        out.append(u / math.sqrt(float(np.dot(u, u))))
    return np.array(out)


def _ref_layernorm(x, gain, bias, eps=1e-5):
    mean = float(np.mean(x))
    var = float(np.mean((x - mean) ** 2))
    return gain * (x - mean) / math.sqrt(var + eps) + bias


def _ref_gelu(u):
    from scipy.special import erf

    return 0.5 * u * (1.0 + erf(u / math.sqrt(2.0)))


def ref_prototype_forward(p, h, c, v):
    """Scripted eval-mode pre-norm transformer block, one label at a time.

    ``p`` is any object with the block's weight attributes (w_q, w_k, w_v,
    w_o, ffn_in, ffn_in_bias, ffn_out, ffn_out_bias, ln1_gain, ln1_bias,
    ln2_gain, ln2_bias).
    """
    n, d = h.shape
    zs = []
    for i in range(n):
        x = [h[i], c[i], v[i]]
        a = [_ref_layernorm(tok, p.ln1_gain, p.ln1_bias) for tok in x]
        q = [tok @ p.w_q for tok in a]
        k = [tok @ p.w_k for tok in a]
        vv = [tok @ p.w_v for tok in a]
        x2 = []
        for t in range(3):
            scores = np.array([float(np.dot(q[t], k[s])) for s in range(3)]) / math.sqrt(d)
            scores = scores - scores.max()
            w = np.exp(scores)
            w = w / w.sum()
            ctx = sum(w[s] * vv[s] for s in range(3))
            x2.append(a[t] + ctx @ p.w_o)
        x3 = []
        for t in range(3):
            b = _ref_layernorm(x2[t], p.ln2_gain, p.ln2_bias)
            ff = _ref_gelu(b @ p.ffn_in + p.ffn_in_bias) @ p.ffn_out + p.ffn_out_bias
            x3.append(b + ff)
        pooled = (x3[0] + x3[1] + x3[2]) / 3.0
        zs.append(pooled / math.sqrt(float(np.dot(pooled, pooled))))
    return np.array(zs)


# ---------------------------------------------------------------------- EMA

def ref_ema_trajectory(c0, h, alpha, steps):
    """Normalized EMA recurrence; returns the list of centroids after each step."""
    c = np.array(c0, dtype=np.float64)
    out = []
    for _ in range(steps):
        c = alpha * c + (1.0 - alpha) * h
        c = c / math.sqrt(float(np.dot(c, c)))
        out.append(c.copy())
    return out


def angle_between(u, v) -> float:
    cos = float(np.dot(u, v)) / (
        math.sqrt(float(np.dot(u, u))) * math.sqrt(float(np.dot(v, v)))
    )
    return math.acos(max(-1.0, min(1.0, cos)))
