"""
Construction of the open-set evaluation splits.

- T1: ``n`` known-source images plus ``{n, 2n, 3n}`` open-pool images that each
  contain at least one object of the first ``{1, 2, 3}`` open semantic groups.
  Known-class objects inside those open images are kept.
- T2: ``n`` known-source images plus ``multiplier * n`` open-pool images with no
  known-class object, for multipliers 0.5, 1, 2 and 4.
- OWOD: four incremental tasks, one semantic group each.

Selection shuffles the canonically sorted candidate ids with a seeded
generator and takes a prefix, so a split is a pure function of its inputs and
seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Hashable, Sequence

import numpy as np

from .data import Annotation, CategorySpace, Dataset, ImageRecord, _id_sort_key, dataset_to_coco
from .errors import CapacityError, ParameterError, UndefinedMetricError, ValidationError

T2_MULTIPLIERS = (0.5, 1.0, 2.0, 4.0)
T1_LEVELS = (20, 40, 60)
BENCHMARKS = ("voc-coco", "m-owodb", "s-owodb")

KNOWN_SOURCE = "known"
OPEN_SOURCE = "open"


@dataclass(frozen=True)
class SemanticGroup:
    name: str
    category_ids: frozenset


def parse_groups(obj) -> list:
    if not isinstance(obj, dict) or "groups" not in obj:
        raise ValidationError("group file needs a 'groups' array")
    return [SemanticGroup(g["name"], frozenset(g["category_ids"])) for g in obj["groups"]]


def load_groups(path=None, benchmark: str = "voc-coco") -> list:
    """Read a ``{groups: [{name, category_ids}]}`` file, or the shipped defaults.

    The shipped memberships are reconstructed from the published group names
    and use COCO category ids.
    """
    if path is None:
        if benchmark not in BENCHMARKS:
            raise ParameterError(f"benchmark must be one of {BENCHMARKS}")
        name = benchmark.replace("-", "_") + "_groups.json"
        text = resources.files("osod.resources").joinpath(name).read_text()
        return parse_groups(json.loads(text))
    with open(path) as f:
        return parse_groups(json.load(f))


def coco_category_names() -> dict:
    text = resources.files("osod.resources").joinpath("coco_categories.json").read_text()
    return {c["id"]: c["name"] for c in json.loads(text)["categories"]}


@dataclass
class SplitResult:
    dataset: Dataset
    mode: str
    n: int
    seed: int
    known_image_ids: list
    open_image_ids: list
    level: int | None = None
    multiplier: float | None = None
    extra: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        out = {"mode": self.mode, "n": self.n}
        if self.level is not None:
            out["level"] = self.level
        if self.multiplier is not None:
            out["multiplier"] = self.multiplier
        out["seed"] = self.seed
        out["image_ids"] = list(self.known_image_ids) + list(self.open_image_ids)
        out["known_image_ids"] = list(self.known_image_ids)
        out["open_image_ids"] = list(self.open_image_ids)
        out.update(self.extra)
        return out


def _sample(ids: Sequence[Hashable], k: int, seed: int, stream: int, what: str) -> list:
    """Seeded shuffle of the sorted ids, then prefix-take; result sorted."""
    ids = sorted(ids, key=_id_sort_key)
    if len(ids) < k:
        raise CapacityError(f"{what}: need {k} images, only {len(ids)} qualify (short by {k - len(ids)})",
                            required=k, available=len(ids))
    rng = np.random.default_rng([int(seed), stream])
    perm = rng.permutation(len(ids))[:k]
    return sorted((ids[i] for i in perm), key=_id_sort_key)


def _reflag(ann: Annotation, space: CategorySpace) -> Annotation:
    unknown = not space.is_known(ann.category_id)
    if unknown == ann.unknown:
        return ann
    return Annotation(ann.image_id, ann.category_id, ann.box, ann.annotation_id, ann.bbox, ann.iscrowd, unknown)


def _assemble(known_eval: Dataset, open_pool: Dataset, known_ids: list, open_ids: list,
              space: CategorySpace) -> Dataset:
    known_set = set(known_ids)
    open_set = set(open_ids)
    clash = known_set & open_set
    if clash:
        raise ValidationError(f"image ids present in both sources: {sorted(clash, key=_id_sort_key)[:5]}")
    images = [ImageRecord(im.id, im.width, im.height, KNOWN_SOURCE) for im in known_eval.images if im.id in known_set]
    images += [ImageRecord(im.id, im.width, im.height, OPEN_SOURCE) for im in open_pool.images if im.id in open_set]
    images.sort(key=lambda im: (im.source != KNOWN_SOURCE, _id_sort_key(im.id)))
    anns = []
    for src, chosen in ((known_eval, known_set), (open_pool, open_set)):
        by_image = src.annotations_by_image
        for iid in sorted(chosen, key=_id_sort_key):
            anns.extend(_reflag(a, space) for a in by_image.get(iid, ()))
    seen = set()
    for a in anns:
        if a.annotation_id in seen:
            raise ValidationError(f"annotation id {a.annotation_id!r} appears in both sources")
        seen.add(a.annotation_id)
    names = {**open_pool.category_names, **known_eval.category_names}
    return Dataset(tuple(images), tuple(anns), space, names)


def _output_space(known_eval: Dataset, open_pool: Dataset, known: frozenset) -> CategorySpace:
    if set(known_eval.categories.known_ids) == set(known):
        known_ids = known_eval.categories.known_ids
    else:
        known_ids = tuple(sorted(known, key=_id_sort_key))
    universe = set()
    for ds in (known_eval, open_pool):
        universe |= set(ds.categories.known_ids) | ds.categories.unknown_source_ids
        universe |= {a.category_id for a in ds.annotations}
    return CategorySpace(known_ids, frozenset(universe - set(known_ids)),
                         known_eval.categories.unknown_wire_id
                         if known_eval.categories.unknown_wire_id not in set(known_ids) else None)


def build_t1_split(known_eval: Dataset, open_pool: Dataset, groups: Sequence[SemanticGroup], level: int,
                   n: int, seed: int) -> SplitResult:
    """Known images plus open images containing the first ``level // 20`` open groups.

    ``groups[0]`` is the known group; ``groups[1:]`` are the open groups in
    the order they are switched on.

    Raises:
        ParameterError: level not in {20, 40, 60} or too few groups.
        CapacityError: not enough known or qualifying open images.
    """
    if level not in T1_LEVELS:
        raise ParameterError(f"level must be one of {T1_LEVELS}")
    if n < 0:
        raise ParameterError("n must be non-negative")
    steps = level // 20
    if len(groups) < 1 + steps:
        raise ParameterError(f"level {level} needs {1 + steps} groups, got {len(groups)}")
    active = frozenset().union(*(g.category_ids for g in groups[1:1 + steps]))
    space = _output_space(known_eval, open_pool, groups[0].category_ids)

    known_ids = _sample([im.id for im in known_eval.images], n, seed, 0, "known-source images")
    by_image = open_pool.annotations_by_image
    qualifying = [iid for iid in open_pool.image_ids
                  if any(a.category_id in active for a in by_image.get(iid, ()))]
    open_ids = _sample(qualifying, steps * n, seed, 1, f"open images for level {level}")
    ds = _assemble(known_eval, open_pool, known_ids, open_ids, space)
    return SplitResult(ds, "T1", n, seed, known_ids, open_ids, level=level)


def build_t2_split(known_eval: Dataset, open_pool: Dataset, multiplier: float, n: int, seed: int) -> SplitResult:
    """Known images plus ``multiplier * n`` open images without any known-class object.

    Raises:
        ParameterError: multiplier outside {0.5, 1, 2, 4} or non-integer image count.
        CapacityError: not enough known or qualifying open images.
    """
    multiplier = float(multiplier)
    if multiplier not in T2_MULTIPLIERS:
        raise ParameterError(f"multiplier must be one of {T2_MULTIPLIERS}")
    if n < 0:
        raise ParameterError("n must be non-negative")
    m = multiplier * n
    if m != int(m):
        raise ParameterError(f"multiplier {multiplier} x n={n} is not a whole number of images")
    m = int(m)
    known = frozenset(known_eval.categories.known_ids)
    space = _output_space(known_eval, open_pool, known)

    known_ids = _sample([im.id for im in known_eval.images], n, seed, 0, "known-source images")
    by_image = open_pool.annotations_by_image
    qualifying = []
    for iid in open_pool.image_ids:
        anns = by_image.get(iid, ())
        if anns and not any(a.category_id in known for a in anns):
            qualifying.append(iid)
    open_ids = _sample(qualifying, m, seed, 2, f"open images for multiplier {multiplier:g}")
    ds = _assemble(known_eval, open_pool, known_ids, open_ids, space)
    return SplitResult(ds, "T2", n, seed, known_ids, open_ids, multiplier=multiplier)


def wilderness_ratio(split: Dataset, space: CategorySpace | None = None) -> float:
    """Open images per known image.

    When every image carries a provenance tag the ratio counts sources;
    otherwise it is (#images with an unknown object and no known object) /
    (#images with a known object).

    Raises:
        UndefinedMetricError: no known images.
    """
    space = space or split.categories
    if not split.images:
        raise UndefinedMetricError("wilderness ratio of an empty split")
    if all(im.source is not None for im in split.images):
        n_known = sum(im.source == KNOWN_SOURCE for im in split.images)
        n_open = sum(im.source == OPEN_SOURCE for im in split.images)
    else:
        n_known = n_open = 0
        by_image = split.annotations_by_image
        for im in split.images:
            anns = by_image.get(im.id, ())
            has_known = any(space.is_known(a.category_id) for a in anns)
            has_unknown = any(not space.is_known(a.category_id) for a in anns)
            if has_known:
                n_known += 1
            elif has_unknown:
                n_open += 1
    if n_known == 0:
        raise UndefinedMetricError("wilderness ratio undefined without known images")
    return n_open / n_known


@dataclass
class OwodTask:
    index: int
    name: str
    class_ids: frozenset
    dataset: Dataset

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)


def build_owod_tasks(pool: Dataset, benchmark: str = "m-owodb", groups: Sequence[SemanticGroup] | None = None) -> list:
    """Four incremental task datasets.

    Task ``t`` holds the pool images containing a class of group ``t`` and
    only the annotations of that group; its category space treats groups
    ``0..t`` as known and the rest as unknown.

    Raises:
        CapacityError: some class of the benchmark never occurs in the pool.
    """
    if benchmark not in ("m-owodb", "s-owodb"):
        raise ParameterError("benchmark must be 'm-owodb' or 's-owodb'")
    groups = list(groups) if groups is not None else load_groups(benchmark=benchmark)
    if len(groups) != 4:
        raise ParameterError("OWOD benchmarks have exactly four groups")
    present = {a.category_id for a in pool.annotations}
    wanted = frozenset().union(*(g.category_ids for g in groups))
    missing = sorted(wanted - present, key=_id_sort_key)
    if missing:
        raise CapacityError(f"pool lacks annotations for {len(missing)} classes: {missing}",
                            required=len(wanted), available=len(wanted) - len(missing))
    by_image = pool.annotations_by_image
    tasks = []
    seen = frozenset()
    for t, g in enumerate(groups):
        seen = seen | g.category_ids
        space = CategorySpace(tuple(sorted(seen, key=_id_sort_key)), frozenset(wanted - seen),
                              None if all(isinstance(c, int) for c in seen) else "unknown")
        images = []
        anns = []
        for im in pool.images:
            mine = [a for a in by_image.get(im.id, ()) if a.category_id in g.category_ids]
            if mine:
                images.append(im)
                anns.extend(_reflag(a, space) for a in mine)
        tasks.append(OwodTask(t + 1, g.name, g.category_ids,
                              Dataset(tuple(images), tuple(anns), space, dict(pool.category_names))))
    return tasks


def write_split(result: SplitResult, out_dir, config: dict | None = None, stem: str = "split") -> tuple:
    """Write the filtered COCO file and its manifest; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    info = {"format_version": "osod-split/1", "config": config or {}}
    ann_path = os.path.join(out_dir, f"{stem}.json")
    man_path = os.path.join(out_dir, f"{stem}_manifest.json")
    with open(ann_path, "w") as f:
        json.dump(dataset_to_coco(result.dataset, info), f)
    manifest = {"format_version": "osod-split/1", "config": config or {}, **result.manifest()}
    with open(man_path, "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    return ann_path, man_path
