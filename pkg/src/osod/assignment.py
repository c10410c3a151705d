"""
Uncertainty-aware label assignment for region proposals.

Positive proposals (max IoU with a known-class box at or above the positive
threshold) keep a one-hot target on the matched class. Negative proposals get
a soft target that splits mass between the unknown and background slots:

    unknown    = objectness**a * g(1 - u)
    background = 1 - unknown

where ``u`` is the proposal's max IoU with known-class ground truth. The six
(a, g) pairs form the ablation presets ``"a"``..``"f"``; ``"e"`` (a=1,
g=identity) is the default.

The top-k hard baseline labels the k most confident negatives of each image
as unknown and every other negative as background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np

from .data import Annotation, CategorySpace
from .errors import DomainError, ParameterError, ValidationError
from .geometry import BBox, boxes_to_array, from_xywh, iou_matrix

DEFAULT_POSITIVE_THRESHOLD = 0.5
DEFAULT_WARMUP_ITERS = 1000
# warmup used by the earlier prior-work recipe; exposed for comparison runs
ALT_WARMUP_ITERS = 100

_GEOMETRY = {
    "linear": lambda x: x,
    "square": lambda x: x * x,
    "sqrt": np.sqrt,
}


@dataclass(frozen=True)
class Proposal:
    image_id: Hashable
    box: BBox
    objectness: float

    def __post_init__(self):
        if not (0.0 <= self.objectness <= 1.0):
            raise DomainError(f"objectness {self.objectness!r} outside [0, 1]")


@dataclass(frozen=True)
class MatchResult:
    proposal_index: int
    matched_annotation_id: Hashable | None
    u: float
    is_positive: bool
    matched_category_id: Hashable | None = None


@dataclass(frozen=True)
class UncertaintyCombinator:
    """Appearance exponent and geometry transform for the unknown soft label."""

    appearance_exponent: int = 1
    geometry: str = "linear"

    def __post_init__(self):
        if self.appearance_exponent not in (1, 2):
            raise ParameterError("appearance_exponent must be 1 or 2")
        if self.geometry not in _GEOMETRY:
            raise ParameterError(f"geometry must be one of {sorted(_GEOMETRY)}")

    def unknown_mass(self, objectness, u):
        """Works elementwise on scalars or arrays."""
        return (objectness ** self.appearance_exponent) * _GEOMETRY[self.geometry](1.0 - u)


COMBINATORS = {
    "a": UncertaintyCombinator(2, "square"),
    "b": UncertaintyCombinator(2, "linear"),
    "c": UncertaintyCombinator(2, "sqrt"),
    "d": UncertaintyCombinator(1, "square"),
    "e": UncertaintyCombinator(1, "linear"),
    "f": UncertaintyCombinator(1, "sqrt"),
}
DEFAULT_COMBINATOR = COMBINATORS["e"]


def match_proposals(proposals: Sequence[Proposal], gt: Sequence[Annotation],
                    positive_threshold: float = DEFAULT_POSITIVE_THRESHOLD) -> list:
    """Match proposals of one image against known-class ground truth.

    Each proposal gets ``u`` = max IoU over ``gt`` (0 without ground truth),
    matched to the argmax box with ties going to the lowest annotation id.

    Raises:
        ValidationError: if proposals or ground truth span several images.
    """
    if not (0.0 < positive_threshold <= 1.0):
        raise ParameterError("positive_threshold must be in (0, 1]")
    ids = {p.image_id for p in proposals} | {a.image_id for a in gt}
    if len(ids) > 1:
        raise ValidationError(f"match_proposals got several image ids: {sorted(map(str, ids))}")
    if not proposals:
        return []
    if not gt:
        return [MatchResult(i, None, 0.0, False) for i in range(len(proposals))]
    gt_sorted = sorted(gt, key=lambda a: (isinstance(a.annotation_id, str), a.annotation_id))
    ious = iou_matrix(boxes_to_array([p.box for p in proposals]),
                      boxes_to_array([a.box for a in gt_sorted]))
    best = ious.argmax(axis=1)  # first maximum == lowest annotation id
    out = []
    for i, j in enumerate(best):
        u = float(ious[i, j])
        ann = gt_sorted[j] if u > 0 else None
        out.append(MatchResult(
            proposal_index=i,
            matched_annotation_id=None if ann is None else ann.annotation_id,
            u=u,
            is_positive=u >= positive_threshold,
            matched_category_id=None if ann is None else ann.category_id,
        ))
    return out


def one_hot(slot: int, space: CategorySpace) -> np.ndarray:
    vec = np.zeros(space.num_slots, dtype=np.float64)
    vec[slot - 1] = 1.0
    return vec


def soft_label(objectness: float, u: float, comb: UncertaintyCombinator, space: CategorySpace) -> np.ndarray:
    """Soft target for a negative proposal.

    Returns:
        length ``K+2`` vector: zeros on known slots, the combinator's unknown
        mass on slot ``K+1`` and the remainder on background.
    """
    if not (0.0 <= objectness <= 1.0):
        raise DomainError(f"objectness {objectness!r} outside [0, 1]")
    if not (0.0 <= u <= 1.0):
        raise DomainError(f"u {u!r} outside [0, 1]")
    vec = np.zeros(space.num_slots, dtype=np.float64)
    unknown = comb.unknown_mass(objectness, u)
    vec[space.unknown_slot - 1] = unknown
    vec[space.background_slot - 1] = 1.0 - unknown
    return vec


def soft_labels(objectness, u, comb: UncertaintyCombinator, space: CategorySpace) -> np.ndarray:
    """Batched :func:`soft_label`: row ``i`` is the target for ``(objectness[i], u[i])``."""
    o = np.asarray(objectness, dtype=np.float64)
    uu = np.asarray(u, dtype=np.float64)
    if o.shape != uu.shape or o.ndim != 1:
        raise ParameterError("objectness and u must be 1-D arrays of equal length")
    if np.any((o < 0) | (o > 1)) or np.any((uu < 0) | (uu > 1)):
        raise DomainError("objectness and u must lie in [0, 1]")
    out = np.zeros((len(o), space.num_slots), dtype=np.float64)
    mass = comb.unknown_mass(o, uu)
    out[:, space.unknown_slot - 1] = mass
    out[:, space.background_slot - 1] = 1.0 - mass
    return out


def _group_by_image(proposals: Sequence[Proposal]) -> dict:
    groups = {}
    for i, p in enumerate(proposals):
        groups.setdefault(p.image_id, []).append(i)
    return groups


def _known_gt_by_image(gt: Iterable[Annotation], space: CategorySpace) -> dict:
    out = {}
    for a in gt:
        if space.is_known(a.category_id) and not a.unknown:
            out.setdefault(a.image_id, []).append(a)
    return out


def _match_all(proposals, gt, space, positive_threshold):
    """Per-image matching; returns MatchResults indexed by global proposal index."""
    gt_by_image = _known_gt_by_image(gt, space)
    results = [None] * len(proposals)
    for image_id, idx in _group_by_image(proposals).items():
        local = match_proposals([proposals[i] for i in idx], gt_by_image.get(image_id, []), positive_threshold)
        for i, m in zip(idx, local):
            results[i] = MatchResult(i, m.matched_annotation_id, m.u, m.is_positive, m.matched_category_id)
    return results


def assign_labels(proposals: Sequence[Proposal], gt: Sequence[Annotation],
                  comb: UncertaintyCombinator = DEFAULT_COMBINATOR, space: CategorySpace | None = None,
                  positive_threshold: float = DEFAULT_POSITIVE_THRESHOLD,
                  iteration: int | None = None, warmup: int = DEFAULT_WARMUP_ITERS) -> list:
    """Target label vector for every proposal.

    Proposals may come from several images; matching runs per image and the
    output follows input order. Unknown-class annotations in ``gt`` are
    ignored. When ``iteration`` is given and below ``warmup``, negatives get
    pure background targets.
    """
    if space is None:
        raise ParameterError("assign_labels needs a category space")
    matches = _match_all(proposals, gt, space, positive_threshold)
    gated = iteration is not None and iteration < warmup
    out = []
    for p, m in zip(proposals, matches):
        if m.is_positive:
            out.append(one_hot(space.slot_of(m.matched_category_id), space))
        elif gated:
            out.append(one_hot(space.background_slot, space))
        else:
            out.append(soft_label(p.objectness, m.u, comb, space))
    return out


def topk_hard_labels(proposals: Sequence[Proposal], gt: Sequence[Annotation], k: int,
                     space: CategorySpace, positive_threshold: float = DEFAULT_POSITIVE_THRESHOLD) -> list:
    """Top-k one-hot baseline: per image, the k highest-objectness negatives become unknown.

    Ties in objectness keep input order.
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    matches = _match_all(proposals, gt, space, positive_threshold)
    chosen = set()
    for idx in _group_by_image(proposals).values():
        negatives = [i for i in idx if not matches[i].is_positive]
        negatives.sort(key=lambda i: -proposals[i].objectness)  # stable
        chosen.update(negatives[:k])
    out = []
    for i, m in enumerate(matches):
        if m.is_positive:
            out.append(one_hot(space.slot_of(m.matched_category_id), space))
        elif i in chosen:
            out.append(one_hot(space.unknown_slot, space))
        else:
            out.append(one_hot(space.background_slot, space))
    return out


@dataclass(frozen=True)
class Histogram:
    bins: list  # (low, high) pairs; the last bin is closed on the right
    counts: list
    fractions: list
    empty: bool


def rpn_score_histogram(scores: Sequence[float], bin_edges: Sequence[float]) -> Histogram:
    """Fraction of scores per bin.

    Bins are half-open ``[lo, hi)`` except the last, which includes its right
    edge, so a score of exactly 0.8 falls in ``[0.8, 1.0]``.
    """
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2:
        raise ParameterError("need at least two bin edges")
    if np.any(np.diff(edges) <= 0):
        raise ParameterError("bin edges must be strictly increasing")
    if edges[0] > 0.0 or edges[-1] < 1.0:
        raise ParameterError("bin edges must cover [0, 1]")
    s = np.asarray(scores, dtype=np.float64)
    if np.any((s < 0) | (s > 1)):
        raise DomainError("scores must lie in [0, 1]")
    counts, _ = np.histogram(s, bins=edges)
    bins = [(float(lo), float(hi)) for lo, hi in zip(edges[:-1], edges[1:])]
    if len(s) == 0:
        return Histogram(bins, [0] * len(bins), [0.0] * len(bins), True)
    return Histogram(bins, counts.tolist(), (counts / len(s)).tolist(), False)


def read_proposals(path) -> list:
    """Read proposals from JSON lines ``{image_id, bbox: [x, y, w, h], objectness}``."""
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(Proposal(rec["image_id"], from_xywh(*rec["bbox"]), float(rec["objectness"])))
            except (KeyError, TypeError, json.JSONDecodeError) as ex:
                raise ValidationError(f"{path}:{lineno}: bad proposal record ({ex})") from None
    return out


def write_proposals(proposals: Sequence[Proposal], path) -> None:
    with open(path, "w") as f:
        for p in proposals:
            f.write(json.dumps({"image_id": p.image_id, "bbox": list(p.box.as_xywh()),
                                "objectness": p.objectness}) + "\n")


def label_records(proposals: Sequence[Proposal], labels: Sequence[np.ndarray]) -> list:
    """Assigned-label dump rows ``{image_id, proposal_index, labels}``.

    ``proposal_index`` counts proposals within their image, in input order.
    """
    counters = {}
    rows = []
    for p, vec in zip(proposals, labels):
        j = counters.get(p.image_id, 0)
        counters[p.image_id] = j + 1
        rows.append({"image_id": p.image_id, "proposal_index": j, "labels": [float(v) for v in vec]})
    return rows
