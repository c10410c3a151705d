"""
Category bookkeeping and COCO-style file ingestion.

Slots are 1-based: known classes occupy slots ``1..K`` in the order of
``CategorySpace.known_ids``, every unknown class is folded into slot ``K+1``
and background is slot ``K+2``. Arrays indexed by slot (label vectors, logits)
therefore store slot ``s`` at position ``s - 1``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Hashable, Iterable, Sequence

import numpy as np

from .errors import MalformedBoxError, SchemaError, ValidationError
from .geometry import BBox, from_xywh

logger = logging.getLogger(__name__)


def _id_sort_key(value):
    # ints before strings so mixed-id files still sort deterministically
    return (isinstance(value, str), value)


@dataclass(frozen=True)
class CategorySpace:
    """K known classes plus the synthetic unknown and background slots.

    Attributes:
        known_ids: dataset category ids of the known classes, in slot order.
        unknown_source_ids: dataset category ids treated as unknown at evaluation.
        unknown_wire_id: category id used for unknown-slot detections in
            results files. Defaults to ``1 + max(known_ids)``.
    """

    known_ids: tuple
    unknown_source_ids: frozenset = frozenset()
    unknown_wire_id: Hashable | None = None

    def __post_init__(self):
        object.__setattr__(self, "known_ids", tuple(self.known_ids))
        object.__setattr__(self, "unknown_source_ids", frozenset(self.unknown_source_ids))
        if len(self.known_ids) < 1:
            raise ValidationError("category space needs at least one known class")
        if len(set(self.known_ids)) != len(self.known_ids):
            raise ValidationError("duplicate known category ids")
        overlap = self.unknown_source_ids & set(self.known_ids)
        if overlap:
            raise ValidationError(f"ids both known and unknown: {sorted(overlap, key=_id_sort_key)}")
        if self.unknown_wire_id is None:
            try:
                wire = 1 + max(int(c) for c in self.known_ids)
            except (TypeError, ValueError):
                raise ValidationError("unknown_wire_id must be given for non-integer category ids")
            object.__setattr__(self, "unknown_wire_id", wire)
        if self.unknown_wire_id in set(self.known_ids):
            raise ValidationError(f"unknown_wire_id {self.unknown_wire_id} collides with a known id")

    @property
    def num_known(self) -> int:
        return len(self.known_ids)

    @property
    def unknown_slot(self) -> int:
        return self.num_known + 1

    @property
    def background_slot(self) -> int:
        return self.num_known + 2

    @property
    def num_slots(self) -> int:
        return self.num_known + 2

    @cached_property
    def _slot_lookup(self) -> dict:
        return {cid: i + 1 for i, cid in enumerate(self.known_ids)}

    def is_known(self, category_id) -> bool:
        return category_id in self._slot_lookup

    def is_unknown_source(self, category_id) -> bool:
        return category_id in self.unknown_source_ids

    def slot_of(self, category_id) -> int:
        """Known-class slot (1..K) of a dataset category id."""
        try:
            return self._slot_lookup[category_id]
        except KeyError:
            raise ValidationError(f"category {category_id!r} is not a known class") from None

    def detection_slot(self, category_id) -> int:
        """Slot for a results-file category id: a known slot or the unknown slot."""
        slot = self._slot_lookup.get(category_id)
        if slot is not None:
            return slot
        if category_id == self.unknown_wire_id:
            return self.unknown_slot
        raise ValidationError(f"detection category {category_id!r} is neither known nor the unknown wire id")

    def category_of_slot(self, slot: int):
        """Inverse of :meth:`detection_slot`."""
        if 1 <= slot <= self.num_known:
            return self.known_ids[slot - 1]
        if slot == self.unknown_slot:
            return self.unknown_wire_id
        raise ValidationError(f"slot {slot} has no wire category id")

    def to_dict(self) -> dict:
        return {
            "known_ids": list(self.known_ids),
            "unknown_source_ids": sorted(self.unknown_source_ids, key=_id_sort_key),
            "unknown_wire_id": self.unknown_wire_id,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CategorySpace":
        if not isinstance(obj, dict) or "known_ids" not in obj:
            raise SchemaError("category space config needs a 'known_ids' list")
        return cls(
            known_ids=tuple(obj["known_ids"]),
            unknown_source_ids=frozenset(obj.get("unknown_source_ids", ())),
            unknown_wire_id=obj.get("unknown_wire_id"),
        )


def load_space(path) -> CategorySpace:
    """Read a category-space config file ``{known_ids, unknown_source_ids, unknown_wire_id}``."""
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as ex:
            raise SchemaError(f"{path}: {ex}") from ex
    return CategorySpace.from_dict(obj)


@dataclass(frozen=True, slots=True)
class ImageRecord:
    id: Hashable
    width: float
    height: float
    # provenance tag set by split construction ("known" / "open"), else None
    source: str | None = None


@dataclass(frozen=True, slots=True)
class Annotation:
    image_id: Hashable
    category_id: Hashable
    box: BBox
    annotation_id: Hashable
    bbox: tuple = ()  # COCO xywh as serialized
    iscrowd: bool = False
    unknown: bool = False


@dataclass(frozen=True, slots=True)
class Detection:
    image_id: Hashable
    class_slot: int
    box: BBox
    score: float


@dataclass(frozen=True)
class Dataset:
    images: tuple
    annotations: tuple
    categories: CategorySpace
    category_names: dict = field(default_factory=dict, compare=False)

    @cached_property
    def image_ids(self) -> list:
        return [im.id for im in self.images]

    @cached_property
    def annotations_by_image(self) -> dict:
        out = {im.id: [] for im in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return out

    def known_annotations(self) -> list:
        return [a for a in self.annotations if not a.unknown]

    def unknown_annotations(self) -> list:
        return [a for a in self.annotations if a.unknown]


def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing key {key!r}")
    return obj[key]


def _clip_xywh(xywh, width, height):
    x, y, w, h = xywh
    if width is None or height is None or width <= 0 or height <= 0:
        return xywh
    x2, y2 = x + w, y + h
    if x >= 0 and y >= 0 and x2 <= width and y2 <= height:
        return xywh
    cx1 = min(max(x, 0.0), width)
    cy1 = min(max(y, 0.0), height)
    cx2 = min(max(x2, 0.0), width)
    cy2 = min(max(y2, 0.0), height)
    return (cx1, cy1, cx2 - cx1, cy2 - cy1)


def parse_annotations(obj: Any, space: CategorySpace, strict: bool = True, where: str = "<annotations>") -> Dataset:
    """Validate a decoded COCO annotation object and build a :class:`Dataset`.

    In strict mode an annotation whose category is neither known nor listed
    in ``space.unknown_source_ids`` raises; in lenient mode it is kept and
    remapped to unknown.
    """
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: top level must be an object")
    raw_images = _require(obj, "images", where)
    raw_anns = _require(obj, "annotations", where)
    raw_cats = _require(obj, "categories", where)
    if not isinstance(raw_images, list) or not isinstance(raw_anns, list) or not isinstance(raw_cats, list):
        raise SchemaError(f"{where}: images/annotations/categories must be arrays")

    images = []
    dims = {}
    for rec in raw_images:
        iid = _require(rec, "id", f"{where}: image")
        if iid in dims:
            raise ValidationError(f"{where}: duplicate image id {iid!r}")
        width = float(rec.get("width", 0) or 0)
        height = float(rec.get("height", 0) or 0)
        dims[iid] = (width, height)
        images.append(ImageRecord(iid, width, height, rec.get("source")))

    names = {}
    for rec in raw_cats:
        names[_require(rec, "id", f"{where}: category")] = rec.get("name", "")

    anns = []
    remapped = 0
    seen_ids = set()
    for rec in raw_anns:
        aid = _require(rec, "id", f"{where}: annotation")
        iid = _require(rec, "image_id", f"{where}: annotation {aid!r}")
        cid = _require(rec, "category_id", f"{where}: annotation {aid!r}")
        bbox = _require(rec, "bbox", f"{where}: annotation {aid!r}")
        if aid in seen_ids:
            raise ValidationError(f"{where}: duplicate annotation id {aid!r}")
        seen_ids.add(aid)
        if iid not in dims:
            raise ValidationError(f"{where}: annotation {aid!r} references missing image {iid!r}")
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            raise SchemaError(f"{where}: annotation {aid!r} bbox must have 4 numbers")
        if space.is_known(cid):
            unknown = False
        elif space.is_unknown_source(cid):
            unknown = True
        elif strict:
            raise ValidationError(f"{where}: annotation {aid!r} has category {cid!r} outside the category space")
        else:
            unknown = True
            remapped += 1
        xywh = tuple(float(v) for v in bbox)
        try:
            from_xywh(*xywh)
        except MalformedBoxError as ex:
            raise ValidationError(f"{where}: annotation {aid!r}: {ex}") from ex
        xywh = _clip_xywh(xywh, *dims[iid])
        anns.append(Annotation(
            image_id=iid,
            category_id=cid,
            box=from_xywh(*xywh),
            annotation_id=aid,
            bbox=xywh,
            iscrowd=bool(rec.get("iscrowd", 0)),
            unknown=unknown,
        ))
    if remapped:
        logger.warning("%s: %d annotations with unlisted categories remapped to unknown", where, remapped)
    return Dataset(tuple(images), tuple(anns), space, names)


def load_annotations(path, space: CategorySpace, strict: bool = True) -> Dataset:
    """Read a COCO annotation JSON file."""
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as ex:
            raise SchemaError(f"{path}: {ex}") from ex
    return parse_annotations(obj, space, strict=strict, where=os.fspath(path))


def dataset_to_coco(ds: Dataset, info: dict | None = None) -> dict:
    images = []
    for im in ds.images:
        rec = {"id": im.id, "width": im.width, "height": im.height}
        if im.source is not None:
            rec["source"] = im.source
        images.append(rec)
    anns = [
        {
            "id": a.annotation_id,
            "image_id": a.image_id,
            "category_id": a.category_id,
            "bbox": list(a.bbox),
            "iscrowd": int(a.iscrowd),
            "area": a.box.area,
        }
        for a in ds.annotations
    ]
    cat_ids = list(ds.category_names) or sorted(
        set(ds.categories.known_ids) | ds.categories.unknown_source_ids, key=_id_sort_key)
    cats = [{"id": cid, "name": ds.category_names.get(cid, str(cid))} for cid in cat_ids]
    out = {}
    if info is not None:
        out["info"] = info
    out.update({"images": images, "annotations": anns, "categories": cats})
    return out


def write_annotations(ds: Dataset, path, info: dict | None = None) -> None:
    with open(path, "w") as f:
        json.dump(dataset_to_coco(ds, info), f)


class DetectionTable:
    """Columnar detections: the representation the metric kernels consume.

    Attributes:
        image_ids: list of image ids, one per detection
        slots: (N,) int64 class slots in ``1..K+1``
        boxes: (N, 4) float64 xyxy boxes
        scores: (N,) float64 scores
    """

    def __init__(self, image_ids: Sequence, slots, boxes, scores):
        self.image_ids = list(image_ids)
        self.slots = np.asarray(slots, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        n = len(self.image_ids)
        if not (len(self.slots) == len(self.boxes) == len(self.scores) == n):
            raise ValidationError("detection columns have different lengths")

    def __len__(self):
        return len(self.scores)

    @classmethod
    def from_detections(cls, dets: Iterable[Detection]) -> "DetectionTable":
        dets = list(dets)
        return cls(
            [d.image_id for d in dets],
            [d.class_slot for d in dets],
            [d.box.as_xyxy() for d in dets] if dets else np.zeros((0, 4)),
            [d.score for d in dets],
        )

    def to_detections(self) -> list:
        return [
            Detection(iid, int(s), BBox(*map(float, b)), float(sc))
            for iid, s, b, sc in zip(self.image_ids, self.slots, self.boxes, self.scores)
        ]

    def take(self, index) -> "DetectionTable":
        index = np.asarray(index, dtype=np.int64)
        return DetectionTable([self.image_ids[i] for i in index], self.slots[index],
                              self.boxes[index], self.scores[index])


def as_table(dets) -> DetectionTable:
    if isinstance(dets, DetectionTable):
        return dets
    return DetectionTable.from_detections(dets)


def parse_detection_table(records: Any, space: CategorySpace, where: str = "<detections>") -> DetectionTable:
    """Validate decoded results-format records into a sorted :class:`DetectionTable`.

    Rows are ordered by image id, then descending score; the sort is stable so
    input order survives among equal keys.
    """
    if not isinstance(records, list):
        raise SchemaError(f"{where}: detections file must be a JSON array")
    n = len(records)
    image_ids = [None] * n
    slots = np.empty(n, dtype=np.int64)
    boxes = np.empty((n, 4), dtype=np.float64)
    scores = np.empty(n, dtype=np.float64)
    slot_cache = {}
    for i, rec in enumerate(records):
        try:
            image_ids[i] = rec["image_id"]
            cid = rec["category_id"]
            bbox = rec["bbox"]
            scores[i] = rec["score"]
        except (KeyError, TypeError):
            raise SchemaError(f"{where}: record {i} needs image_id, category_id, bbox, score") from None
        slot = slot_cache.get(cid)
        if slot is None:
            slot = slot_cache[cid] = space.detection_slot(cid)
        slots[i] = slot
        if len(bbox) != 4:
            raise SchemaError(f"{where}: record {i} bbox must have 4 numbers")
        boxes[i] = bbox
    if n:
        if not np.all(np.isfinite(boxes)) or np.any(boxes[:, 2:] < 0):
            bad = int(np.flatnonzero(~np.isfinite(boxes).all(1) | (boxes[:, 2:] < 0).any(1))[0])
            raise ValidationError(f"{where}: record {bad} has a malformed bbox")
        bad_score = ~((scores >= 0.0) & (scores <= 1.0))
        if bad_score.any():
            i = int(np.flatnonzero(bad_score)[0])
            raise ValidationError(f"{where}: record {i} score {scores[i]!r} outside [0, 1]")
        boxes[:, 2] += boxes[:, 0]
        boxes[:, 3] += boxes[:, 1]
    uniq = sorted(set(image_ids), key=_id_sort_key)
    rank = {iid: r for r, iid in enumerate(uniq)}
    img_rank = np.fromiter((rank[i] for i in image_ids), dtype=np.int64, count=n)
    order = np.lexsort((-scores, img_rank))  # lexsort is stable
    table = DetectionTable(image_ids, slots, boxes, scores)
    return table.take(order)


def load_detection_table(path, space: CategorySpace) -> DetectionTable:
    with open(path) as f:
        try:
            records = json.load(f)
        except json.JSONDecodeError as ex:
            raise SchemaError(f"{path}: {ex}") from ex
    return parse_detection_table(records, space, where=os.fspath(path))


def load_detections(path, space: CategorySpace) -> list:
    """Read a COCO results file into :class:`Detection` objects.

    Returns:
        detections sorted stably by (image_id, descending score). A record
        whose category is ``space.unknown_wire_id`` maps to the unknown slot.
    """
    return load_detection_table(path, space).to_detections()


def detections_to_records(dets, space: CategorySpace) -> list:
    table = as_table(dets)
    out = []
    for iid, slot, b, sc in zip(table.image_ids, table.slots, table.boxes, table.scores):
        x1, y1, x2, y2 = (float(v) for v in b)
        out.append({
            "image_id": iid,
            "category_id": space.category_of_slot(int(slot)),
            "bbox": [x1, y1, x2 - x1, y2 - y1],
            "score": float(sc),
        })
    return out


def write_detections(dets, space: CategorySpace, path) -> None:
    with open(path, "w") as f:
        json.dump(detections_to_records(dets, space), f)
