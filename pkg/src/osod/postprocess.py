"""
Inference-time filtering applied to raw scored boxes before evaluation.

Pipeline per image: drop scores below the threshold, run NMS separately per
known class and once over the unknown slot, then keep the best known boxes up
to the cap and fill what is left with the best unknown boxes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import CategorySpace, Detection, DetectionTable, as_table
from .geometry import iou_matrix

# raw predictions and final detections share one record type
RawPrediction = Detection

DEFAULT_SCORE_THR = 0.05
DEFAULT_NMS_THR = 0.5
DEFAULT_MAX_DETS = 100


def score_filter(preds: Sequence[Detection], threshold: float = DEFAULT_SCORE_THR) -> list:
    """Keep predictions with ``score >= threshold``."""
    return [p for p in preds if p.score >= threshold]


def _nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> np.ndarray:
    order = np.argsort(-scores, kind="stable")
    if len(order) <= 1:
        return order
    ious = iou_matrix(boxes[order], boxes[order])
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_thr
    return order[np.asarray(keep, dtype=np.int64)]


def nms(preds: Sequence[Detection], iou_thr: float = DEFAULT_NMS_THR) -> list:
    """Greedy NMS for predictions of a single class slot.

    Boxes overlapping a kept box with IoU strictly above ``iou_thr`` are
    dropped. Output is in descending score order, ties in input order.
    """
    preds = list(preds)
    if len({p.class_slot for p in preds}) > 1:
        raise ValueError("nms expects predictions of a single class slot")
    if not preds:
        return []
    t = as_table(preds)
    return [preds[i] for i in _nms_indices(t.boxes, t.scores, iou_thr)]


def select_top(known_preds: Sequence[Detection], unknown_preds: Sequence[Detection],
               cap: int = DEFAULT_MAX_DETS) -> list:
    """Per image: best known predictions up to ``cap``, then best unknown ones to fill.

    Output groups images by first appearance; within an image known
    predictions come first, each group in descending score order.
    """
    order = []
    known = {}
    unknown = {}
    for p in known_preds:
        if p.image_id not in known and p.image_id not in unknown:
            order.append(p.image_id)
        known.setdefault(p.image_id, []).append(p)
    for p in unknown_preds:
        if p.image_id not in known and p.image_id not in unknown:
            order.append(p.image_id)
        unknown.setdefault(p.image_id, []).append(p)
    out = []
    for iid in order:
        ks = sorted(known.get(iid, []), key=lambda p: -p.score)[:cap]
        us = sorted(unknown.get(iid, []), key=lambda p: -p.score)[:cap - len(ks)]
        out.extend(ks)
        out.extend(us)
    return out


select_top100 = select_top


def postprocess(preds, space: CategorySpace, score_thr: float = DEFAULT_SCORE_THR,
                nms_thr: float = DEFAULT_NMS_THR, max_dets: int = DEFAULT_MAX_DETS) -> list:
    """Full pipeline over predictions from any number of images.

    Applying it to its own output returns the same list.
    """
    preds = list(preds.to_detections() if isinstance(preds, DetectionTable) else preds)
    kept = score_filter(preds, score_thr)
    by_image = {}
    for p in kept:
        by_image.setdefault(p.image_id, []).append(p)
    known_out = []
    unknown_out = []
    for iid, items in by_image.items():
        by_slot = {}
        for p in items:
            by_slot.setdefault(p.class_slot, []).append(p)
        survivors = []
        for slot, group in by_slot.items():
            survivors.extend(nms(group, nms_thr))
        # restore input order so ties stay stable in select_top
        rank = {id(p): i for i, p in enumerate(items)}
        survivors.sort(key=lambda p: rank[id(p)])
        for p in survivors:
            (unknown_out if p.class_slot == space.unknown_slot else known_out).append(p)
    return select_top(known_out, unknown_out, max_dets)
