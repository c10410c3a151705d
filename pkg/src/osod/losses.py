"""
Reference implementations of the per-proposal losses and score transforms.

Everything here works on single proposals in float64. Batch reduction is a
separate step (:func:`mean_reduce`) because it is a training-loop choice,
not part of the loss definitions.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax of a 1-D logit vector."""
    o = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(o)):
        raise DomainError("softmax needs finite logits")
    z = np.exp(o - o.max())
    return z / z.sum()


def log_softmax(logits) -> np.ndarray:
    o = np.asarray(logits, dtype=np.float64)
    shifted = o - o.max()
    return shifted - math.log(np.exp(shifted).sum())


def soft_cross_entropy(p, q) -> float:
    """Cross-entropy ``-sum_c q_c log p_c`` between a prediction and a (soft) target.

    Classes with ``q_c == 0`` contribute nothing even when ``p_c == 0``. A
    positive target mass on a zero-probability class returns ``inf``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DomainError(f"shape mismatch: {p.shape} vs {q.shape}")
    mask = q > 0
    if np.any(p[mask] <= 0):
        return math.inf
    return float(-np.sum(q[mask] * np.log(p[mask])))


def soft_cross_entropy_logits(logits, q) -> float:
    """Cross-entropy of ``softmax(logits)`` against ``q``, via log-softmax."""
    q = np.asarray(q, dtype=np.float64)
    return float(-np.sum(q * log_softmax(logits)))


def soft_cross_entropy_grad(logits, q) -> np.ndarray:
    """Gradient of :func:`soft_cross_entropy_logits` w.r.t. the logits.

    Equals ``softmax(o) * sum(q) - q``, which is ``softmax(o) - q`` for a
    normalized target.
    """
    q = np.asarray(q, dtype=np.float64)
    total = q.sum()
    p = softmax(logits)
    if total == 1.0:
        return p - q
    return p * total - q


def smooth_l1(b, t, beta: float = 1.0) -> float:
    """Smooth-L1 summed over coordinates.

    Per coordinate with ``d = b - t``: ``0.5 d^2 / beta`` if ``|d| < beta``,
    else ``|d| - 0.5 beta``.
    """
    if beta <= 0:
        raise DomainError("beta must be positive")
    d = np.abs(np.asarray(b, dtype=np.float64) - np.asarray(t, dtype=np.float64))
    per = np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)
    return float(per.sum())


def smooth_l1_grad(b, t, beta: float = 1.0) -> np.ndarray:
    """Gradient of :func:`smooth_l1` w.r.t. the prediction ``b``."""
    if beta <= 0:
        raise DomainError("beta must be positive")
    d = np.asarray(b, dtype=np.float64) - np.asarray(t, dtype=np.float64)
    return np.where(np.abs(d) < beta, d / beta, np.sign(d))


def total_loss(l_rpn: float, l_reg: float, l_cls: float, weights: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """Multi-task loss; unit weights give the plain sum."""
    parts = (l_rpn, l_reg, l_cls)
    if not all(math.isfinite(v) for v in parts):
        raise DomainError("loss components must be finite")
    return math.fsum(w * v for w, v in zip(weights, parts))


def mean_reduce(losses: Sequence[float]) -> float:
    """Mean over sampled proposals; 0 for an empty batch."""
    if len(losses) == 0:
        return 0.0
    return math.fsum(losses) / len(losses)


def weight_fn(p, alpha: float):
    """Example weighting ``(1 - p)^alpha * p``; ``alpha = 0`` is the identity."""
    if alpha < 0:
        raise DomainError("alpha must be non-negative")
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any((p_arr < 0) | (p_arr > 1)):
        raise DomainError("p must lie in [0, 1]")
    out = np.power(1.0 - p_arr, alpha) * p_arr
    return float(out) if out.ndim == 0 else out


def entropy(p) -> float:
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def entropy_unknown_flag(p, threshold: float = 0.25) -> bool:
    """Flag a prediction as unknown when its entropy exceeds ``threshold``."""
    return entropy(p) > threshold


def finite_difference_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        grad.flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``; exactly 0 where ``a == b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.where(diff == 0, 0.0, diff / denom)


def grad_check(f: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-6,
               floor: float = 1e-5) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``floor`` bounds the denominator from below so that components whose true
    gradient is zero are judged against the finite-difference noise level
    (about ``eps * |f| / h``) instead of blowing up.
    """
    if h <= 0:
        raise DomainError("step must be positive")
    numeric = finite_difference_grad(f, x, h)
    analytic = np.asarray(grad(np.array(x, dtype=np.float64)), dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(relative_error(analytic, numeric, floor).max())
