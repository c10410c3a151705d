"""
Open-set detection metrics.

All metrics are built on one greedy matching pass per IoU threshold. For every
known class the detections are swept in descending score order (ties keep
input order); each detection becomes

- TP if the best still-unmatched GT box of that class reaches the IoU threshold,
- FP_unknown if instead the best still-unmatched unknown GT box reaches it,
- FP_known otherwise.

Every GT box is consumed at most once per class sweep. Unknown-slot detections
are swept the same way against the merged unknown GT (class agnostic).

Crowd GT: a detection whose only qualifying match is a crowd box of its own
sweep is dropped from the tally (neither TP nor FP) and crowd boxes are left
out of recall denominators. In known-class sweeps crowd unknown boxes still
produce FP_unknown, so WI and AOSE stay conservative.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Hashable, NamedTuple, Sequence

import numpy as np

from .data import CategorySpace, Dataset, DetectionTable, as_table
from .errors import ParameterError, UndefinedMetricError
from .geometry import BBox, boxes_to_array, iou_matrix

TP, FP_KNOWN, FP_UNKNOWN, IGNORED = 0, 1, 2, 3

AP_VARIANTS = ("voc07", "area")
WI_VARIANTS = ("per-class", "pooled")
AOSE_MODES = ("gt-consumption", "raw")
REPORT_FORMAT_VERSION = "osod-report/1"


def _thread_count() -> int:
    try:
        n = int(os.environ.get("OSOD_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

def _best_free(row, cols, used):
    best = -1.0
    best_j = -1
    for j in cols:
        if j not in used:
            v = row[j]
            if v > best:
                best = v
                best_j = j
    return best, best_j


def _sweep(rows, target_cols, crowd_cols, other_cols, thr):
    """Greedy sweep over score-ordered IoU rows.

    Returns a list of outcome codes and a list of "touches an unknown box" flags.
    """
    used_t = set()
    used_o = set()
    outcomes = []
    touches = []
    for row in rows:
        hit = False
        for j in other_cols:
            if row[j] >= thr:
                hit = True
                break
        touches.append(hit)
        best, j = _best_free(row, target_cols, used_t)
        if j >= 0 and best >= thr:
            used_t.add(j)
            outcomes.append(TP)
            continue
        if crowd_cols:
            crowd_best = max(row[c] for c in crowd_cols)
            if crowd_best >= thr:
                outcomes.append(IGNORED)
                continue
        best, j = _best_free(row, other_cols, used_o)
        if j >= 0 and best >= thr:
            used_o.add(j)
            outcomes.append(FP_UNKNOWN)
        else:
            outcomes.append(FP_KNOWN)
    return outcomes, touches


def greedy_match(det_boxes, det_scores, gt_known, gt_unknown=(), iou_thr: float = 0.5) -> np.ndarray:
    """Match one class's detections in one image.

    Args:
        det_boxes: detection boxes (BBox list or (N, 4) xyxy array)
        det_scores: detection scores; sorted internally, ties keep input order
        gt_known: GT boxes of the detections' class
        gt_unknown: unknown-class GT boxes of the same image
        iou_thr: minimum IoU for a match

    Returns:
        (N,) outcome codes (``TP``, ``FP_KNOWN``, ``FP_UNKNOWN``) in input order.
    """
    det = _as_array(det_boxes)
    known = _as_array(gt_known)
    unknown = _as_array(gt_unknown)
    scores = np.asarray(det_scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(det[order], np.concatenate([known, unknown]))
    nk = len(known)
    outcomes, _ = _sweep(ious.tolist(), list(range(nk)), [], list(range(nk, nk + len(unknown))), iou_thr)
    out = np.empty(len(det), dtype=np.int8)
    out[order] = outcomes
    return out


def _as_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64)
    boxes = list(boxes)
    if boxes and isinstance(boxes[0], BBox):
        return boxes_to_array(boxes)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


@dataclass
class _GroundTruth:
    """Per-image GT arrays, sorted by annotation id."""

    boxes: np.ndarray
    slots: list  # known slot, or 0 for unknown
    crowd: list


def _gt_index(dataset: Dataset, space: CategorySpace) -> dict:
    out = {}
    for image_id, anns in dataset.annotations_by_image.items():
        anns = sorted(anns, key=lambda a: (isinstance(a.annotation_id, str), a.annotation_id))
        out[image_id] = _GroundTruth(
            boxes_to_array([a.box for a in anns]),
            [0 if (a.unknown or not space.is_known(a.category_id)) else space.slot_of(a.category_id) for a in anns],
            [a.iscrowd for a in anns],
        )
    return out


_EMPTY_GT = _GroundTruth(np.zeros((0, 4)), [], [])


def _match_image(det_boxes, det_slots, gt: _GroundTruth, unknown_slot, thresholds):
    nd = len(det_slots)
    ious = iou_matrix(det_boxes, gt.boxes).tolist()
    unk_plain = [j for j, s in enumerate(gt.slots) if s == 0 and not gt.crowd[j]]
    unk_crowd = [j for j, s in enumerate(gt.slots) if s == 0 and gt.crowd[j]]
    unk_all = [j for j, s in enumerate(gt.slots) if s == 0]
    outs = {thr: ([], []) for thr in thresholds}
    start = 0
    while start < nd:
        s = det_slots[start]
        end = start
        while end < nd and det_slots[end] == s:
            end += 1
        rows = ious[start:end] if ious and ious[0] else [[]] * (end - start)
        if s == unknown_slot:
            target, crowd, other = unk_plain, unk_crowd, []
        else:
            target = [j for j, gs in enumerate(gt.slots) if gs == s and not gt.crowd[j]]
            crowd = [j for j, gs in enumerate(gt.slots) if gs == s and gt.crowd[j]]
            other = unk_all
        for thr in thresholds:
            o, t = _sweep(rows, target, crowd, other, thr)
            outs[thr][0].extend(o)
            outs[thr][1].extend(t)
        start = end
    return outs


@dataclass
class ClassTally:
    """Score-ordered match records of one slot.

    Attributes:
        slot: class slot (known slot or the unknown slot)
        scores: descending scores
        outcomes: outcome code per record (``TP``/``FP_KNOWN``/``FP_UNKNOWN``)
        det_index: row of each record in the evaluated detection table
        n_gt: non-crowd GT count for the slot
    """

    slot: int
    scores: np.ndarray
    outcomes: np.ndarray
    det_index: np.ndarray
    n_gt: int

    @property
    def tp(self) -> int:
        return int(np.count_nonzero(self.outcomes == TP))

    @property
    def fp_known(self) -> int:
        return int(np.count_nonzero(self.outcomes == FP_KNOWN))

    @property
    def fp_unknown(self) -> int:
        return int(np.count_nonzero(self.outcomes == FP_UNKNOWN))


@dataclass
class MatchTally:
    """Greedy matching result of a whole dataset at one IoU threshold."""

    iou_thr: float
    known: dict  # slot -> ClassTally
    unknown: ClassTally
    touches_unknown: np.ndarray  # per detection row: IoU >= thr with some unknown GT
    outcomes: np.ndarray  # per detection row, IGNORED included
    notes: list = field(default_factory=list)

    @property
    def tp_known(self) -> int:
        return sum(t.tp for t in self.known.values())

    @property
    def fp_known(self) -> int:
        return sum(t.fp_known for t in self.known.values())

    @property
    def fp_unknown(self) -> int:
        return sum(t.fp_unknown for t in self.known.values())


def match_dataset(dets, dataset: Dataset, space: CategorySpace, thresholds: Sequence[float] = (0.5,),
                  threads: int | None = None) -> dict:
    """Run the greedy matching for every threshold in one pass over the images.

    Images are processed in chunks on a thread pool; results are written back
    by detection row, so the output does not depend on the thread count.

    Returns:
        dict mapping each threshold to its :class:`MatchTally`.
    """
    thresholds = tuple(float(t) for t in thresholds)
    for thr in thresholds:
        if not (0.0 < thr <= 1.0):
            raise ParameterError(f"IoU threshold {thr} outside (0, 1]")
    table = as_table(dets)
    n = len(table)
    bad = (table.slots < 1) | (table.slots > space.unknown_slot)
    if np.any(bad):
        raise ParameterError(f"detection slot {int(table.slots[bad][0])} outside 1..{space.unknown_slot}")

    image_rank = {iid: r for r, iid in enumerate(dataset.image_ids)}
    notes = []
    missing = {}
    ranks = np.empty(n, dtype=np.int64)
    for i, iid in enumerate(table.image_ids):
        r = image_rank.get(iid)
        if r is None:
            r = missing.get(iid)
            if r is None:
                r = missing[iid] = len(image_rank) + len(missing)
        ranks[i] = r
    if missing:
        sample = ", ".join(map(str, list(missing)[:5]))
        notes.append(f"{len(missing)} detection image ids absent from annotations (e.g. {sample}); "
                     "their detections count as FP")

    order = np.lexsort((np.arange(n), -table.scores, table.slots, ranks))
    sorted_ranks = ranks[order]
    cuts = np.flatnonzero(np.diff(sorted_ranks)) + 1
    starts = np.concatenate([[0], cuts]).astype(np.int64) if n else np.zeros(0, dtype=np.int64)
    ends = np.concatenate([cuts, [n]]).astype(np.int64) if n else np.zeros(0, dtype=np.int64)

    gt_index = _gt_index(dataset, space)
    rank_to_id = dataset.image_ids + list(missing)
    boxes_sorted = table.boxes[order]
    slots_sorted = table.slots[order].tolist()
    unknown_slot = space.unknown_slot

    def work(span):
        lo, hi = span
        res = {thr: ([], []) for thr in thresholds}
        for a, b in zip(starts[lo:hi].tolist(), ends[lo:hi].tolist()):
            gt = gt_index.get(rank_to_id[int(sorted_ranks[a])], _EMPTY_GT)
            outs = _match_image(boxes_sorted[a:b], slots_sorted[a:b], gt, unknown_slot, thresholds)
            for thr in thresholds:
                res[thr][0].extend(outs[thr][0])
                res[thr][1].extend(outs[thr][1])
        return res

    n_groups = len(starts)
    chunk = 512
    spans = [(i, min(i + chunk, n_groups)) for i in range(0, n_groups, chunk)]
    nthreads = threads if threads is not None else _thread_count()
    if nthreads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            parts = list(pool.map(work, spans))
    else:
        parts = [work(s) for s in spans]

    n_gt = {s: 0 for s in range(1, space.num_known + 1)}
    n_unknown_gt = 0
    for gt in gt_index.values():
        for s, crowd in zip(gt.slots, gt.crowd):
            if crowd:
                continue
            if s == 0:
                n_unknown_gt += 1
            else:
                n_gt[s] += 1

    out = {}
    for thr in thresholds:
        outcomes = np.empty(n, dtype=np.int8)
        touches = np.empty(n, dtype=bool)
        if n:
            outcomes[order] = np.fromiter((o for p in parts for o in p[thr][0]), dtype=np.int8, count=n)
            touches[order] = np.fromiter((t for p in parts for t in p[thr][1]), dtype=bool, count=n)
        known = {s: _class_tally(table, outcomes, s, n_gt[s]) for s in range(1, space.num_known + 1)}
        unknown = _class_tally(table, outcomes, unknown_slot, n_unknown_gt)
        out[thr] = MatchTally(thr, known, unknown, touches, outcomes, list(notes))
    return out


def _class_tally(table: DetectionTable, outcomes: np.ndarray, slot: int, n_gt: int) -> ClassTally:
    rows = np.flatnonzero((table.slots == slot) & (outcomes != IGNORED))
    scores = table.scores[rows]
    order = np.lexsort((rows, -scores))
    rows = rows[order]
    return ClassTally(slot, table.scores[rows], outcomes[rows], rows, n_gt)


# ---------------------------------------------------------------------------
# precision / recall
# ---------------------------------------------------------------------------

@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    scores: np.ndarray
    tp: np.ndarray  # cumulative TP count per prefix
    fp: np.ndarray  # cumulative FP count per prefix
    n_gt: int


def pr_curve(tally: ClassTally) -> PRCurve:
    is_tp = tally.outcomes == TP
    tp = np.cumsum(is_tp, dtype=np.int64)
    fp = np.cumsum(~is_tp, dtype=np.int64)
    denom = np.maximum(tp + fp, 1)
    precision = tp / denom
    recall = tp / tally.n_gt if tally.n_gt > 0 else np.zeros(len(tp))
    return PRCurve(recall, precision, tally.scores.copy(), tp, fp, tally.n_gt)


def average_precision(curve: PRCurve, variant: str = "voc07") -> float:
    """AP of a PR curve, as a percentage.

    ``voc07`` averages the interpolated precision at recall 0, 0.1, ..., 1;
    ``area`` integrates the monotone precision envelope over recall.

    Raises:
        UndefinedMetricError: the class has no ground truth.
    """
    if variant not in AP_VARIANTS:
        raise ParameterError(f"AP variant must be one of {AP_VARIANTS}")
    if curve.n_gt <= 0:
        raise UndefinedMetricError("AP undefined without ground truth")
    if len(curve.tp) == 0:
        return 0.0
    prec = curve.precision
    if variant == "voc07":
        tp = curve.tp
        vals = []
        for i in range(11):
            # recall >= i/10, compared exactly in integers
            reach = tp * 10 >= i * curve.n_gt
            vals.append(float(prec[reach].max()) if reach.any() else 0.0)
        return 100.0 * math.fsum(vals) / 11.0
    envelope = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.diff(np.concatenate([[0], curve.tp])) > 0
    return 100.0 * math.fsum(envelope[steps].tolist()) / curve.n_gt


def _class_ap(tally: ClassTally, variant: str):
    try:
        return average_precision(pr_curve(tally), variant)
    except UndefinedMetricError:
        return None


def map_known(dets, dataset: Dataset, space: CategorySpace, iou_thr: float = 0.5, variant: str = "voc07") -> float:
    """Mean AP over known classes that have at least one GT box.

    Raises:
        UndefinedMetricError: no known-class GT in the dataset.
    """
    tally = match_dataset(dets, dataset, space, (iou_thr,))[float(iou_thr)]
    return _map_from_tally(tally, variant)[0]


def _map_from_tally(tally: MatchTally, variant: str):
    aps = {s: _class_ap(t, variant) for s, t in tally.known.items()}
    valid = [v for v in aps.values() if v is not None]
    if not valid:
        raise UndefinedMetricError("no known-class ground truth")
    return math.fsum(valid) / len(valid), aps


def unknown_ap(dets, dataset: Dataset, space: CategorySpace, iou_thr: float = 0.5, variant: str = "voc07") -> float:
    """Class-agnostic AP of unknown-slot detections against the merged unknown GT."""
    tally = match_dataset(dets, dataset, space, (iou_thr,))[float(iou_thr)]
    return average_precision(pr_curve(tally.unknown), variant)


def _recall_from_tally(t: ClassTally) -> float:
    if t.n_gt <= 0:
        raise UndefinedMetricError("recall undefined without ground truth")
    return 100.0 * t.tp / t.n_gt


def unknown_recall(dets, dataset: Dataset, space: CategorySpace, iou_thr: float = 0.5) -> float:
    """Percentage of (non-crowd) unknown GT matched by an unknown-slot detection."""
    tally = match_dataset(dets, dataset, space, (iou_thr,))[float(iou_thr)]
    return _recall_from_tally(tally.unknown)


def class_agnostic_recall(boxes_by_image: dict, gt_by_image: dict, iou_thr: float = 0.5) -> float:
    """Percentage of GT boxes covered by at least one box with IoU >= ``iou_thr``.

    Args:
        boxes_by_image: image id -> candidate boxes (proposals or detections)
        gt_by_image: image id -> GT boxes of any class
    """
    total = 0
    covered = 0
    for image_id, gt in gt_by_image.items():
        g = _as_array(gt)
        total += len(g)
        cand = boxes_by_image.get(image_id)
        if cand is None or len(g) == 0:
            continue
        c = _as_array(cand)
        if len(c) == 0:
            continue
        covered += int(np.count_nonzero(iou_matrix(g, c).max(axis=1) >= iou_thr))
    if total == 0:
        raise UndefinedMetricError("class-agnostic recall undefined without ground truth")
    return 100.0 * covered / total


# ---------------------------------------------------------------------------
# wilderness impact / open-set error
# ---------------------------------------------------------------------------

def wi_from_counts(tp_known: int, fp_known: int, fp_unknown: int) -> float:
    """``FP_U / (TP_K + FP_K)``."""
    return fp_unknown / (tp_known + fp_known)


def wi_from_precisions(tp_known: int, fp_known: int, fp_unknown: int) -> float:
    """``P_K / P_{K+U} - 1`` with the two precisions computed explicitly."""
    p_known = tp_known / (tp_known + fp_known)
    p_open = tp_known / (tp_known + fp_known + fp_unknown)
    return p_known / p_open - 1.0


@dataclass
class WIPoint:
    """Tally of the first score prefix reaching the recall level."""

    slot: int | None
    reached: bool
    tp: int = 0
    fp_known: int = 0
    fp_unknown: int = 0
    recall: float = 0.0
    score: float | None = None

    @property
    def wi(self):
        if not self.reached:
            return None
        return wi_from_counts(self.tp, self.fp_known, self.fp_unknown)


def _wi_point(scores, outcomes, det_index, n_gt, recall_level, slot=None) -> WIPoint:
    if n_gt <= 0 or len(outcomes) == 0:
        return WIPoint(slot, False)
    tp = np.cumsum(outcomes == TP)
    recall = tp / n_gt
    hits = np.flatnonzero(recall >= recall_level)
    if len(hits) == 0:
        return WIPoint(slot, False, int(tp[-1]), recall=float(recall[-1]))
    k = int(hits[0])
    prefix = outcomes[:k + 1]
    return WIPoint(slot, True, int(tp[k]), int(np.count_nonzero(prefix == FP_KNOWN)),
                   int(np.count_nonzero(prefix == FP_UNKNOWN)), float(recall[k]), float(scores[k]))


def _wi_from_tally(tally: MatchTally, recall_level: float, variant: str):
    if variant not in WI_VARIANTS:
        raise ParameterError(f"WI variant must be one of {WI_VARIANTS}")
    points = {s: _wi_point(t.scores, t.outcomes, t.det_index, t.n_gt, recall_level, s)
              for s, t in tally.known.items()}
    if variant == "per-class":
        vals = [p.wi for p in points.values() if p.reached]
        value = 100.0 * math.fsum(vals) / len(vals) if vals else None
        return value, points
    tallies = list(tally.known.values())
    scores = np.concatenate([t.scores for t in tallies]) if tallies else np.zeros(0)
    outcomes = np.concatenate([t.outcomes for t in tallies]) if tallies else np.zeros(0, np.int8)
    rows = np.concatenate([t.det_index for t in tallies]) if tallies else np.zeros(0, np.int64)
    order = np.lexsort((rows, -scores))
    pooled = _wi_point(scores[order], outcomes[order], rows[order],
                       sum(t.n_gt for t in tallies), recall_level)
    value = 100.0 * pooled.wi if pooled.reached else None
    return value, {**points, None: pooled}


def wilderness_impact(dets, dataset: Dataset, space: CategorySpace, iou_thr: float = 0.8,
                      recall_level: float = 0.8, variant: str = "per-class") -> float:
    """Wilderness impact x100 at the first score cutoff reaching ``recall_level``.

    ``per-class`` averages the per-class values over classes that reach the
    recall level; ``pooled`` sweeps all known-class detections together.

    Raises:
        UndefinedMetricError: no class reaches the recall level; the message
            lists each class's best recall.
    """
    tally = match_dataset(dets, dataset, space, (iou_thr,))[float(iou_thr)]
    value, points = _wi_from_tally(tally, recall_level, variant)
    if value is None:
        diag = ", ".join(f"slot {p.slot}: recall {p.recall:.3f}" for p in points.values() if p.slot is not None)
        raise UndefinedMetricError(f"no class reaches recall {recall_level} ({diag})")
    return value


def _aose_from_tally(tally: MatchTally, table: DetectionTable, space: CategorySpace, mode: str) -> int:
    if mode not in AOSE_MODES:
        raise ParameterError(f"AOSE mode must be one of {AOSE_MODES}")
    if mode == "gt-consumption":
        return tally.fp_unknown
    known = table.slots <= space.num_known
    return int(np.count_nonzero(known & tally.touches_unknown & (tally.outcomes != TP)
                                & (tally.outcomes != IGNORED)))


def aose(dets, dataset: Dataset, space: CategorySpace, iou_thr: float = 0.5, mode: str = "gt-consumption") -> int:
    """Absolute open-set error: known-class detections landing on unknown objects.

    ``gt-consumption`` counts FP_unknown records (each unknown box absorbs at
    most one detection per class sweep); ``raw`` counts every non-TP known
    detection overlapping some unknown box.
    """
    table = as_table(dets)
    tally = match_dataset(table, dataset, space, (iou_thr,))[float(iou_thr)]
    return _aose_from_tally(tally, table, space, mode)


# ---------------------------------------------------------------------------
# latent space statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingRecord:
    label: Hashable
    vector: tuple


class EmbeddingStats(NamedTuple):
    intra_class_variance: float
    inter_class_distance: float


def class_variances(records: Sequence[EmbeddingRecord]) -> dict:
    """Mean squared distance to the class centroid, per class."""
    groups = _group_vectors(records)
    return {k: float(np.mean(np.sum((v - v.mean(axis=0)) ** 2, axis=1))) for k, v in groups.items()}


def _group_vectors(records):
    groups = {}
    dim = None
    for r in records:
        vec = np.asarray(r.vector, dtype=np.float64)
        if dim is None:
            dim = vec.shape
        elif vec.shape != dim:
            raise ParameterError("embedding vectors must share one dimension")
        groups.setdefault(r.label, []).append(vec)
    return {k: np.stack(v) for k, v in groups.items()}


def embedding_stats(records: Sequence[EmbeddingRecord]) -> EmbeddingStats:
    """Intra-class variance and inter-class centroid distance.

    intra: mean over classes of the mean squared distance to the class centroid.
    inter: mean Euclidean distance over all pairs of class centroids.
    """
    groups = _group_vectors(records)
    if len(groups) < 2:
        raise UndefinedMetricError("inter-class distance needs at least two classes")
    intra = math.fsum(float(np.mean(np.sum((v - v.mean(axis=0)) ** 2, axis=1))) for v in groups.values())
    centroids = np.stack([v.mean(axis=0) for v in groups.values()])
    d = np.sqrt(np.sum((centroids[:, None, :] - centroids[None, :, :]) ** 2, axis=-1))
    iu = np.triu_indices(len(centroids), k=1)
    return EmbeddingStats(intra / len(groups), float(np.mean(d[iu])))


def read_embeddings(path) -> list:
    """Read JSON lines ``{class, vector: [...]}``."""
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out.append(EmbeddingRecord(rec["class"], tuple(rec["vector"])))
    return out


# ---------------------------------------------------------------------------
# full evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalConfig:
    iou_thr: float = 0.5
    wi_iou_thr: float = 0.8
    wi_recall: float = 0.8
    ap_variant: str = "voc07"
    wi_variant: str = "per-class"
    aose_mode: str = "gt-consumption"

    def validate(self):
        if self.ap_variant not in AP_VARIANTS:
            raise ParameterError(f"ap_variant must be one of {AP_VARIANTS}")
        if self.wi_variant not in WI_VARIANTS:
            raise ParameterError(f"wi_variant must be one of {WI_VARIANTS}")
        if self.aose_mode not in AOSE_MODES:
            raise ParameterError(f"aose_mode must be one of {AOSE_MODES}")
        if not (0.0 < self.wi_recall <= 1.0):
            raise ParameterError("wi_recall must be in (0, 1]")


@dataclass
class ClassReport:
    slot: int
    category_id: Hashable
    n_gt: int
    n_det: int
    ap: float | None
    tp: int
    fp_known: int
    fp_unknown: int
    wi: float | None
    wi_recall_reached: bool


@dataclass
class EvalReport:
    map_known: float | None
    wi: float | None
    aose: int
    u_ap: float | None
    u_recall: float | None
    per_class: list
    n_images: int
    n_detections: int
    n_unknown_gt: int
    config: dict
    notes: list = field(default_factory=list)
    pr_curves: dict = field(default_factory=dict, repr=False)  # slot -> PRCurve

    def to_dict(self) -> dict:
        def r6(x):
            return None if x is None else round(float(x), 6)

        return {
            "format_version": REPORT_FORMAT_VERSION,
            "config": self.config,
            "metrics": {
                "mAP_known": r6(self.map_known),
                "WI": r6(self.wi),
                "AOSE": int(self.aose),
                "U_AP": r6(self.u_ap),
                "U_Recall": r6(self.u_recall),
            },
            "counts": {
                "images": self.n_images,
                "detections": self.n_detections,
                "unknown_gt": self.n_unknown_gt,
            },
            "per_class": [
                {
                    "slot": c.slot,
                    "category_id": c.category_id,
                    "n_gt": c.n_gt,
                    "n_det": c.n_det,
                    "AP": r6(c.ap),
                    "TP": c.tp,
                    "FP_known": c.fp_known,
                    "FP_unknown": c.fp_unknown,
                    "WI": r6(c.wi),
                    "WI_recall_reached": c.wi_recall_reached,
                }
                for c in self.per_class
            ],
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {REPORT_FORMAT_VERSION} config={json.dumps(self.config, sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "name", "value"])
        for name, val in self.to_dict()["metrics"].items():
            w.writerow(["metric", name, _fmt(val)])
        for c in self.per_class:
            for name, val in (("AP", c.ap), ("n_gt", c.n_gt), ("TP", c.tp), ("FP_known", c.fp_known),
                              ("FP_unknown", c.fp_unknown), ("WI", None if c.wi is None else 100.0 * c.wi)):
                w.writerow([f"class:{c.category_id}", name, _fmt(val)])
        return buf.getvalue()

    def pr_curves_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {REPORT_FORMAT_VERSION} config={json.dumps(self.config, sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "rank", "score", "recall", "precision"])
        for label, curve in self.pr_curves.items():
            for i in range(len(curve.tp)):
                w.writerow([label, i + 1, f"{curve.scores[i]:.6f}", f"{curve.recall[i]:.6f}",
                            f"{curve.precision[i]:.6f}"])
        return buf.getvalue()

    def summary_table(self) -> str:
        """Human-readable two-decimal summary."""
        def f2(x):
            return "n/a" if x is None else f"{x:.2f}"

        lines = [
            f"mAP(known)  {f2(self.map_known)}",
            f"WI          {f2(self.wi)}",
            f"A-OSE       {self.aose}",
            f"U-AP        {f2(self.u_ap)}",
            f"U-Recall    {f2(self.u_recall)}",
        ]
        return "\n".join(lines)


def _fmt(val):
    if val is None:
        return ""
    if isinstance(val, (int, np.integer)) and not isinstance(val, bool):
        return str(int(val))
    return f"{float(val):.6f}"


def evaluate(dets, dataset: Dataset, space: CategorySpace, config: EvalConfig | None = None,
             run_config: dict | None = None, threads: int | None = None) -> EvalReport:
    """Compute every metric with one matching pass per distinct IoU threshold."""
    config = config or EvalConfig()
    config.validate()
    table = as_table(dets)
    thresholds = sorted({float(config.iou_thr), float(config.wi_iou_thr)})
    tallies = match_dataset(table, dataset, space, thresholds, threads=threads)
    main = tallies[float(config.iou_thr)]
    wi_tally = tallies[float(config.wi_iou_thr)]
    notes = list(main.notes)

    aps = {s: _class_ap(t, config.ap_variant) for s, t in main.known.items()}
    valid = [v for v in aps.values() if v is not None]
    map_value = math.fsum(valid) / len(valid) if valid else None
    missing_gt = [space.known_ids[s - 1] for s, v in aps.items() if v is None]
    if missing_gt:
        notes.append(f"known classes without GT excluded from mAP: {missing_gt}")
    if map_value is None:
        notes.append("mAP undefined: no known-class ground truth")

    wi_value, points = _wi_from_tally(wi_tally, config.wi_recall, config.wi_variant)
    if wi_value is None:
        notes.append(f"WI undefined: no class reaches recall {config.wi_recall}")
    not_reached = [space.known_ids[s - 1] for s, p in points.items()
                   if s is not None and not p.reached and main.known[s].n_gt > 0]
    if not_reached:
        notes.append(f"classes below WI recall level: {not_reached}")
    notes.append(f"WI variant: {config.wi_variant}; AP variant: {config.ap_variant}; AOSE mode: {config.aose_mode}")

    aose_value = _aose_from_tally(main, table, space, config.aose_mode)

    if main.unknown.n_gt > 0:
        u_ap = average_precision(pr_curve(main.unknown), config.ap_variant)
        u_recall = _recall_from_tally(main.unknown)
    else:
        u_ap = u_recall = None
        notes.append("U-AP and U-Recall undefined: no unknown ground truth")

    per_class = []
    for s, t in main.known.items():
        p = points[s]
        per_class.append(ClassReport(
            slot=s, category_id=space.known_ids[s - 1], n_gt=t.n_gt, n_det=len(t.outcomes),
            ap=aps[s], tp=t.tp, fp_known=t.fp_known, fp_unknown=t.fp_unknown,
            wi=p.wi, wi_recall_reached=p.reached,
        ))
    curves = {space.known_ids[s - 1]: pr_curve(t) for s, t in main.known.items()}
    curves["unknown"] = pr_curve(main.unknown)
    return EvalReport(
        map_known=map_value, wi=wi_value, aose=aose_value, u_ap=u_ap, u_recall=u_recall,
        per_class=per_class, n_images=len(dataset.images), n_detections=len(table),
        n_unknown_gt=main.unknown.n_gt,
        config=run_config if run_config is not None else config.__dict__.copy(),
        notes=notes, pr_curves=curves,
    )
