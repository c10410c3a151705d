"""Embedded oracle comparisons run by ``osod selfcheck``."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import assignment, geometry, losses, metrics, oracles
from .data import Annotation, CategorySpace, Dataset, Detection, ImageRecord
from .geometry import BBox, from_xywh


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _check_iou(impl, rng):
    worst = 0.0
    for _ in range(500):
        pts = rng.integers(0, 65, size=(2, 4))
        a = (min(pts[0, 0], pts[0, 2]), min(pts[0, 1], pts[0, 3]), max(pts[0, 0], pts[0, 2]), max(pts[0, 1], pts[0, 3]))
        b = (min(pts[1, 0], pts[1, 2]), min(pts[1, 1], pts[1, 3]), max(pts[1, 0], pts[1, 2]), max(pts[1, 1], pts[1, 3]))
        got = impl(BBox(*map(float, a)), BBox(*map(float, b)))
        worst = max(worst, abs(got - oracles.raster_iou(a, b)))
    return worst <= 1e-9, f"max abs error {worst:.3g}"


def _random_curve(rng):
    n_det = int(rng.integers(0, 9))
    n_gt = int(rng.integers(1, 5))
    scores = rng.permutation(np.linspace(0.05, 0.95, 50))[:n_det]
    is_tp = np.zeros(n_det, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    tp_slots = rng.choice(n_det, size=min(n_gt, n_det, int(rng.integers(0, n_gt + 1))), replace=False) if n_det else []
    is_tp[list(tp_slots)] = True
    tally = metrics.ClassTally(1, scores[order], np.where(is_tp[order], metrics.TP, metrics.FP_KNOWN).astype(np.int8),
                               order, n_gt)
    return tally, list(scores), list(is_tp), n_gt


def _check_ap(impl, rng):
    for trial in range(200):
        tally, scores, is_tp, n_gt = _random_curve(rng)
        curve = metrics.pr_curve(tally)
        for variant in metrics.AP_VARIANTS:
            got = impl(curve, variant)
            want = oracles.ap_threshold_sweep(scores, is_tp, n_gt, variant)
            if got != want:
                return False, f"trial {trial} {variant}: got {got!r}, oracle {want!r}"
    return True, "200 random curves, both variants exact"


def _check_wi(impl_counts, impl_prec):
    worst = 0.0
    for tp, fpk, fpu in oracles.enumerate_wi_tallies(500):
        worst = max(worst, abs(100 * impl_counts(tp, fpk, fpu) - 100 * impl_prec(tp, fpk, fpu)))
    return worst <= 1e-9, f"max discrepancy {worst:.3g}"


def _check_grad_ce(rng):
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(3, 8))
        o = rng.normal(size=k) * 2
        q = rng.dirichlet(np.ones(k))
        worst = max(worst, losses.grad_check(lambda x: losses.soft_cross_entropy_logits(x, q),
                                             lambda x: losses.soft_cross_entropy_grad(x, q), o, 1e-6))
    return worst < 1e-4, f"max relative error {worst:.3g}"


def _check_grad_smooth_l1(rng):
    worst = 0.0
    for _ in range(100):
        t = rng.normal(size=4)
        d = rng.choice([-1, 1], size=4) * rng.choice([rng.uniform(0.05, 0.8), rng.uniform(1.2, 4.0)], size=4)
        b = t + d
        worst = max(worst, losses.grad_check(lambda x: losses.smooth_l1(x, t), lambda x: losses.smooth_l1_grad(x, t), b))
    return worst < 1e-4, f"max relative error {worst:.3g}"


def _check_soft_label(rng):
    space = CategorySpace(tuple(range(1, 21)))
    for name, comb in assignment.COMBINATORS.items():
        for o, u in rng.uniform(size=(200, 2)):
            v = assignment.soft_label(float(o), float(u), comb, space)
            if abs(v.sum() - 1.0) > 1e-12 or v.min() < 0 or np.any(v[:20] != 0):
                return False, f"combinator {name} at ({o}, {u})"
    v = assignment.soft_label(0.8, 0.25, assignment.COMBINATORS["e"], space)
    if abs(v[20] - 0.6) > 1e-12:
        return False, f"point check gave {v[20]}"
    return True, "six combinators valid, point check 0.6"


def _perfect_scene():
    space = CategorySpace((1, 2, 3), frozenset({7, 8}))
    images, anns, dets = [], [], []
    aid = 0
    for i in range(10):
        images.append(ImageRecord(i, 200.0, 200.0))
        for j, cat in enumerate((1, 2, 3, 7, 8)):
            aid += 1
            xywh = (10.0 + 30 * j, 10.0 + 5 * i, 25.0, 40.0)
            anns.append(Annotation(i, cat, from_xywh(*xywh), aid, xywh, False, cat in (7, 8)))
            slot = space.unknown_slot if cat in (7, 8) else space.slot_of(cat)
            dets.append(Detection(i, slot, from_xywh(*xywh), 1.0))
    return Dataset(tuple(images), tuple(anns), space), dets, space


def _check_perfect():
    ds, dets, space = _perfect_scene()
    rep = metrics.evaluate(dets, ds, space)
    ok = (rep.map_known == 100.0 and rep.u_ap == 100.0 and rep.u_recall == 100.0 and rep.wi == 0.0 and rep.aose == 0)
    return ok, f"mAP {rep.map_known} U-AP {rep.u_ap} U-R {rep.u_recall} WI {rep.wi} AOSE {rep.aose}"


def run_selfcheck(overrides: dict | None = None, seed: int = 0) -> list:
    """Run every check; ``overrides`` swaps implementations (used for mutation tests)."""
    impl = {
        "iou": geometry.iou,
        "average_precision": metrics.average_precision,
        "wi_from_counts": metrics.wi_from_counts,
        "wi_from_precisions": metrics.wi_from_precisions,
    }
    impl.update(overrides or {})
    rng = np.random.default_rng(seed)
    checks = [
        ("iou", lambda: _check_iou(impl["iou"], rng)),
        ("average_precision", lambda: _check_ap(impl["average_precision"], rng)),
        ("wilderness_impact_identity", lambda: _check_wi(impl["wi_from_counts"], impl["wi_from_precisions"])),
        ("soft_cross_entropy_gradient", lambda: _check_grad_ce(rng)),
        ("smooth_l1_gradient", lambda: _check_grad_smooth_l1(rng)),
        ("soft_label", lambda: _check_soft_label(rng)),
        ("perfect_detector", _check_perfect),
    ]
    results = []
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as ex:  # a crashing check is a failed check
            ok, detail = False, f"{type(ex).__name__}: {ex}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results
