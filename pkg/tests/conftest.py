import json

import numpy as np
import pytest

from osod.data import Annotation, CategorySpace, Dataset, Detection, ImageRecord
from osod.geometry import BBox, from_xywh


def make_ann(image_id, cat, xyxy, aid, space, iscrowd=False):
    box = BBox(*map(float, xyxy))
    return Annotation(image_id, cat, box, aid, box.as_xywh(), iscrowd, not space.is_known(cat))


def make_dataset(space, images, anns):
    """images: list of ids; anns: list of (image_id, cat, xyxy[, iscrowd])."""
    recs = tuple(ImageRecord(i, 1000.0, 1000.0) for i in images)
    out = []
    for aid, a in enumerate(anns, 1):
        out.append(make_ann(a[0], a[1], a[2], aid, space, a[3] if len(a) > 3 else False))
    return Dataset(recs, tuple(out), space)


def synthetic_scene(n_images, seed=0, known=(1, 2, 3), unknown=(7, 8, 9), max_objects=5):
    """Random non-overlapping-ish boxes; returns (dataset, perfect detections, space)."""
    rng = np.random.default_rng(seed)
    space = CategorySpace(tuple(known), frozenset(unknown))
    images, anns, dets = [], [], []
    aid = 0
    cats = list(known) + list(unknown)
    for i in range(n_images):
        images.append(ImageRecord(i, 800.0, 800.0))
        n = int(rng.integers(1, max_objects + 1))
        for j in range(n):
            # one grid cell per object keeps boxes disjoint
            x = 150.0 * j + float(rng.uniform(0, 20))
            y = float(rng.uniform(0, 600))
            w = float(rng.uniform(30, 120))
            h = float(rng.uniform(30, 150))
            cat = cats[int(rng.integers(len(cats)))]
            aid += 1
            anns.append(Annotation(i, cat, from_xywh(x, y, w, h), aid, (x, y, w, h), False, cat in unknown))
            slot = space.unknown_slot if cat in unknown else space.slot_of(cat)
            dets.append(Detection(i, slot, from_xywh(x, y, w, h), 1.0))
    return Dataset(tuple(images), tuple(anns), space), dets, space


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f)
    return path


@pytest.fixture
def space3():
    return CategorySpace((1, 2, 3), frozenset({7, 8, 9}))


def make_pools(n_known, n_open, groups, seed=0, aid_start=10_000_000):
    """Known-source dataset over groups[0] plus an open pool drawing from all groups.

    Open image ``i`` gets one to three objects; roughly a quarter of open images
    contain a known-group object.
    """
    rng = np.random.default_rng(seed)
    known_ids = tuple(sorted(groups[0].category_ids))
    others = sorted(set().union(*(g.category_ids for g in groups[1:])))
    universe = frozenset(set(known_ids) | set(others))
    space = CategorySpace(known_ids, universe - set(known_ids), 0)
    k_images = tuple(ImageRecord(i, 640.0, 480.0) for i in range(n_known))
    k_anns = []
    for i in range(n_known):
        cat = known_ids[int(rng.integers(len(known_ids)))]
        k_anns.append(Annotation(i, cat, from_xywh(10, 10, 50, 50), i + 1, (10, 10, 50, 50), False, False))
    o_images = []
    o_anns = []
    aid = aid_start
    cats = np.array(others)
    for j in range(n_open):
        iid = 1_000_000 + j
        o_images.append(ImageRecord(iid, 640.0, 480.0))
        picks = list(cats[rng.integers(len(cats), size=int(rng.integers(1, 4)))])
        if rng.uniform() < 0.25:
            picks.append(known_ids[int(rng.integers(len(known_ids)))])
        for c in picks:
            aid += 1
            c = int(c)
            o_anns.append(Annotation(iid, c, from_xywh(5, 5, 40, 40), aid, (5, 5, 40, 40), False, c not in known_ids))
    return (Dataset(k_images, tuple(k_anns), space), Dataset(tuple(o_images), tuple(o_anns), space))


def write_scene(root, dataset, dets, space):
    """Write annotations, detections and space config; returns the three paths."""
    from osod.data import dataset_to_coco, write_detections
    root.mkdir(parents=True, exist_ok=True)
    ann = write_json(root / "annotations.json", dataset_to_coco(dataset))
    write_detections(dets, space, root / "detections.json")
    sp = write_json(root / "space.json", space.to_dict())
    return str(ann), str(root / "detections.json"), str(sp)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    log = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])
    entry = {"name": request.node.name, "detail": "", "passed": None}
    log.append(entry)
    yield entry
    rep = getattr(request.node, "rep_call", None)
    entry["passed"] = bool(rep is not None and rep.passed)
    if rep is not None and rep.failed and not entry["detail"]:
        entry["detail"] = str(rep.longrepr).splitlines()[-1][:200]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(_ACCEPTANCE_KEY, [])
    if not log:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for e in log:
        status = "PASS" if e["passed"] else "FAIL"
        terminalreporter.write_line(f"{status}  {e['name']}  {e['detail']}")
