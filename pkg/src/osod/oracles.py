"""
Brute-force reference computations.

These are deliberately naive and share no code with the production paths they
check. They back the ``selfcheck`` command and the test suite.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def raster_iou(a: Sequence[int], b: Sequence[int]) -> float:
    """IoU of two integer xyxy boxes by counting unit cells on the pixel grid."""
    x_lo = min(a[0], b[0])
    y_lo = min(a[1], b[1])
    x_hi = max(a[2], b[2])
    y_hi = max(a[3], b[3])
    if x_hi <= x_lo or y_hi <= y_lo:
        return 0.0
    xs = np.arange(x_lo, x_hi)[None, :]
    ys = np.arange(y_lo, y_hi)[:, None]
    in_a = (xs >= a[0]) & (xs < a[2]) & (ys >= a[1]) & (ys < a[3])
    in_b = (xs >= b[0]) & (xs < b[2]) & (ys >= b[1]) & (ys < b[3])
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(in_a & in_b)) / union


def ap_threshold_sweep(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int, variant: str) -> float:
    """AP by evaluating precision/recall at every distinct score cutoff.

    Scores are assumed distinct so that cutoffs and rank prefixes coincide.
    """
    cutoffs = sorted(set(scores), reverse=True)
    points = []
    for c in cutoffs:
        sel = [t for s, t in zip(scores, is_tp) if s >= c]
        tp = sum(1 for t in sel if t)
        points.append((tp, tp / len(sel)))
    if variant == "area":
        top = max((tp for tp, _ in points), default=0)
        terms = [max(p for tp, p in points if tp >= m) for m in range(1, top + 1)]
        return 100.0 * math.fsum(terms) / n_gt
    if variant == "voc07":
        vals = [max((p for tp, p in points if 10 * tp >= i * n_gt), default=0.0) for i in range(11)]
        return 100.0 * math.fsum(vals) / 11.0
    raise ValueError(variant)


def enumerate_wi_tallies(limit: int = 500) -> list:
    """Integer tallies (TP_K >= 1, FP_K, FP_U) in a fixed enumeration order."""
    out = []
    total = 1
    while len(out) < limit:
        for tp in range(1, total + 1):
            for fpk in range(0, total - tp + 1):
                fpu = total - tp - fpk
                out.append((tp, fpk, fpu))
                if len(out) == limit:
                    return out
        total += 1
    return out


def softmax_ce_grad_chain_rule(logits, q) -> np.ndarray:
    """Gradient of ``-sum q log softmax(o)`` via the explicit softmax Jacobian."""
    o = np.asarray(logits, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    e = np.exp(o - o.max())
    p = e / e.sum()
    jac = np.diag(p) - np.outer(p, p)  # d p_i / d o_j
    dl_dp = -q / p
    return jac.T @ dl_dp


def greedy_sweep_reference(ious_known, ious_unknown, thr):
    """Row-by-row greedy sweep written directly from the matching rules.

    Args:
        ious_known: IoU rows (score-descending) against same-class known GT
        ious_unknown: IoU rows against unknown GT

    Returns:
        list of "TP", "FP_known", "FP_unknown"
    """
    used_k = set()
    used_u = set()
    out = []
    for rk, ru in zip(ious_known, ious_unknown):
        free_k = [(v, j) for j, v in enumerate(rk) if j not in used_k]
        best_k = max(free_k, key=lambda vj: (vj[0], -vj[1]), default=None)
        if best_k is not None and best_k[0] >= thr:
            used_k.add(best_k[1])
            out.append("TP")
            continue
        free_u = [(v, j) for j, v in enumerate(ru) if j not in used_u]
        best_u = max(free_u, key=lambda vj: (vj[0], -vj[1]), default=None)
        if best_u is not None and best_u[0] >= thr:
            used_u.add(best_u[1])
            out.append("FP_unknown")
        else:
            out.append("FP_known")
    return out
