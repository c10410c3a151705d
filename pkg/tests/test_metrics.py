import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_dataset, synthetic_scene
from osod import metrics, oracles
from osod.data import CategorySpace, Detection
from osod.errors import ParameterError, UndefinedMetricError
from osod.geometry import BBox
from osod.metrics import FP_KNOWN, FP_UNKNOWN, IGNORED, TP

SPACE = CategorySpace((1, 2), frozenset({7, 8}))
U = SPACE.unknown_slot


def box(*xyxy):
    return BBox(*map(float, xyxy))


def det(image, slot, xyxy, score):
    return Detection(image, slot, box(*xyxy), score)


def curve_of(outcomes, n_gt):
    n = len(outcomes)
    scores = np.linspace(1.0, 0.1, n) if n else np.zeros(0)
    tally = metrics.ClassTally(1, scores, np.asarray(outcomes, dtype=np.int8), np.arange(n), n_gt)
    return metrics.pr_curve(tally)


# --- greedy matching -------------------------------------------------------

def test_greedy_single_tp():
    assert list(metrics.greedy_match([box(0, 0, 10, 10)], [0.9], [box(0, 0, 10, 10)])) == [TP]


def test_greedy_known_detection_on_unknown_gt():
    assert list(metrics.greedy_match([box(0, 0, 10, 10)], [0.9], [], [box(0, 0, 10, 10)])) == [FP_UNKNOWN]


def test_greedy_duplicate_is_fp_known():
    out = metrics.greedy_match([box(0, 0, 10, 10), box(0, 0, 10, 10)], [0.8, 0.9], [box(0, 0, 10, 10)])
    assert list(out) == [FP_KNOWN, TP]  # input order; the 0.9 detection wins


def test_greedy_takes_best_unmatched():
    # first detection overlaps both GT, but the second GT fits it better
    gts = [box(0, 0, 10, 10), box(2, 0, 12, 10)]
    out = metrics.greedy_match([box(1, 0, 11, 10), box(0, 0, 10, 10)], [0.9, 0.8], gts)
    assert list(out) == [TP, TP]


iou_rows = st.lists(st.floats(0, 1), min_size=0, max_size=4)


@given(st.integers(0, 6), st.integers(0, 4), st.integers(0, 3), st.integers(0, 10_000))
def test_greedy_sweep_matches_reference(n_det, n_known, n_unknown, seed):
    rng = np.random.default_rng(seed)

    def rand_boxes(n):
        xy = rng.integers(0, 20, size=(n, 2))
        wh = rng.integers(1, 15, size=(n, 2))
        return np.concatenate([xy, xy + wh], axis=1).astype(float)

    d, k, u = rand_boxes(n_det), rand_boxes(n_known), rand_boxes(n_unknown)
    scores = rng.permutation(n_det) / max(n_det, 1)
    order = np.argsort(-scores, kind="stable")
    rk = [[oracles.raster_iou(d[i], g) for g in k] for i in order]
    ru = [[oracles.raster_iou(d[i], g) for g in u] for i in order]
    want = oracles.greedy_sweep_reference(rk, ru, 0.5)
    got = metrics.greedy_match(d, scores, k, u, 0.5)[order]
    names = {TP: "TP", FP_KNOWN: "FP_known", FP_UNKNOWN: "FP_unknown"}
    assert [names[int(x)] for x in got] == want


# --- average precision -----------------------------------------------------

def test_ap_single_tp():
    for v in metrics.AP_VARIANTS:
        assert metrics.average_precision(curve_of([TP], 1), v) == 100.0


def test_ap_no_detections():
    for v in metrics.AP_VARIANTS:
        assert metrics.average_precision(curve_of([], 3), v) == 0.0


def test_ap_tp_fp_tp():
    c = curve_of([TP, FP_KNOWN, TP], 2)
    assert metrics.average_precision(c, "area") == pytest.approx(500 / 6, abs=1e-12)
    # 11-point: recall 0..0.5 at precision 1, 0.6..1.0 at 2/3
    assert metrics.average_precision(c, "voc07") == pytest.approx(100 * (6 + 5 * 2 / 3) / 11, abs=1e-12)


def test_ap_undefined_and_bad_variant():
    with pytest.raises(UndefinedMetricError):
        metrics.average_precision(curve_of([FP_KNOWN], 0))
    with pytest.raises(ParameterError):
        metrics.average_precision(curve_of([TP], 1), "coco")


outcome_seq = st.lists(st.sampled_from([TP, FP_KNOWN, FP_UNKNOWN]), max_size=8)


@given(outcome_seq, st.integers(0, 4))
def test_ap_matches_threshold_sweep(seq, extra_gt):
    n_gt = max(1, seq.count(TP) + extra_gt)
    c = curve_of(seq, n_gt)
    for v in metrics.AP_VARIANTS:
        want = oracles.ap_threshold_sweep(list(c.scores), [o == TP for o in seq], n_gt, v) if seq else 0.0
        assert metrics.average_precision(c, v) == want


@given(outcome_seq.filter(lambda s: any(o != TP for o in s)), st.integers(0, 3), st.data())
def test_removing_fp_never_lowers_ap(seq, extra_gt, data):
    n_gt = max(1, seq.count(TP) + extra_gt)
    fps = [i for i, o in enumerate(seq) if o != TP]
    drop = data.draw(st.sampled_from(fps))
    shorter = seq[:drop] + seq[drop + 1:]
    for v in metrics.AP_VARIANTS:
        assert metrics.average_precision(curve_of(shorter, n_gt), v) >= metrics.average_precision(curve_of(seq, n_gt), v)


@given(outcome_seq, st.integers(0, 3))
def test_pr_curve_ranges(seq, extra_gt):
    c = curve_of(seq, max(1, seq.count(TP) + extra_gt))
    assert np.all(np.diff(c.recall) >= 0)
    assert np.all((c.recall >= 0) & (c.recall <= 1) & (c.precision >= 0) & (c.precision <= 1))


# --- dataset-level metrics -------------------------------------------------

def test_perfect_detector():
    ds, dets, space = synthetic_scene(30, seed=4)
    rep = metrics.evaluate(dets, ds, space)
    assert (rep.map_known, rep.u_ap, rep.u_recall, rep.wi, rep.aose) == (100.0, 100.0, 100.0, 0.0, 0)


def test_empty_detections():
    ds, _, space = synthetic_scene(5, seed=1)
    assert metrics.map_known([], ds, space) == 0.0
    assert metrics.unknown_ap([], ds, space) == 0.0
    assert metrics.aose([], ds, space) == 0


def test_map_known_toy_with_missed_gt():
    ds = make_dataset(SPACE, [1], [(1, 1, (0, 0, 10, 10)), (1, 2, (20, 0, 30, 10)), (1, 2, (40, 0, 50, 10))])
    dets = [det(1, 1, (0, 0, 10, 10), 0.9), det(1, 2, (20, 0, 30, 10), 0.8)]
    for v in metrics.AP_VARIANTS:
        want = (100.0 + oracles.ap_threshold_sweep([0.8], [True], 2, v)) / 2
        assert metrics.map_known(dets, ds, SPACE, variant=v) == want


def test_map_known_undefined_without_known_gt():
    ds = make_dataset(SPACE, [1], [(1, 7, (0, 0, 10, 10))])
    with pytest.raises(UndefinedMetricError):
        metrics.map_known([], ds, SPACE)


def test_unknown_ap_and_recall():
    ds = make_dataset(SPACE, [1], [(1, 7, (0, 0, 10, 10)), (1, 8, (20, 0, 30, 10)), (1, 7, (40, 0, 50, 10))])
    dets = [det(1, U, (0, 0, 10, 10), 0.9), det(1, U, (0, 0, 10, 10), 0.85), det(1, U, (20, 0, 30, 10), 0.7),
            det(1, U, (100, 100, 110, 110), 0.6)]
    assert metrics.unknown_recall(dets, ds, SPACE) == pytest.approx(200 / 3)
    for v in metrics.AP_VARIANTS:
        want = oracles.ap_threshold_sweep([0.9, 0.85, 0.7, 0.6], [True, False, True, False], 3, v)
        assert metrics.unknown_ap(dets, ds, SPACE, variant=v) == want
    # all unknown detections on background
    assert metrics.unknown_ap([det(1, U, (200, 200, 210, 210), 0.5)], ds, SPACE) == 0.0


def test_unknown_metrics_undefined_without_unknown_gt():
    ds = make_dataset(SPACE, [1], [(1, 1, (0, 0, 10, 10))])
    with pytest.raises(UndefinedMetricError):
        metrics.unknown_recall([], ds, SPACE)
    rep = metrics.evaluate([], ds, SPACE)
    assert rep.u_ap is None and rep.u_recall is None


def test_class_agnostic_recall():
    gt = {1: [box(0, 0, 10, 10), box(20, 0, 30, 10)], 2: [box(0, 0, 5, 5), box(50, 50, 60, 60)]}
    assert metrics.class_agnostic_recall(gt, gt) == 100.0
    assert metrics.class_agnostic_recall({}, gt) == 0.0
    cand = {1: [box(0, 0, 10, 10)], 2: [box(50, 50, 60, 60)]}
    assert metrics.class_agnostic_recall(cand, gt) == 50.0
    with pytest.raises(UndefinedMetricError):
        metrics.class_agnostic_recall(cand, {})


# --- wilderness impact -----------------------------------------------------

def test_wi_zero_without_unknown_fp():
    ds = make_dataset(SPACE, [1], [(1, 1, (0, 0, 10, 10)), (1, 7, (50, 50, 60, 60))])
    assert metrics.wilderness_impact([det(1, 1, (0, 0, 10, 10), 0.9)], ds, SPACE) == 0.0


def test_wi_toy_prefix():
    ds = make_dataset(SPACE, [1], [(1, 1, (0, 0, 10, 10)), (1, 1, (20, 0, 30, 10)), (1, 7, (50, 50, 60, 60))])
    dets = [det(1, 1, (0, 0, 10, 10), 0.9), det(1, 1, (50, 50, 60, 60), 0.8), det(1, 1, (20, 0, 30, 10), 0.7),
            det(1, 1, (200, 200, 210, 210), 0.6)]
    # prefix reaching recall 0.8 has TP=2, FP_K=0, FP_U=1
    assert metrics.wilderness_impact(dets, ds, SPACE) == 50.0
    assert metrics.wilderness_impact(dets, ds, SPACE, variant="pooled") == 50.0


def test_wi_undefined_when_recall_not_reached():
    ds = make_dataset(SPACE, [1], [(1, 1, (0, 0, 10, 10)), (1, 1, (20, 0, 30, 10))])
    with pytest.raises(UndefinedMetricError, match="slot 1"):
        metrics.wilderness_impact([det(1, 1, (0, 0, 10, 10), 0.9)], ds, SPACE)


def test_wi_per_class_vs_pooled():
    ds = make_dataset(SPACE, [1], [(1, 1, (0, 0, 10, 10)), (1, 2, (20, 0, 30, 10)), (1, 7, (50, 50, 60, 60))])
    dets = [det(1, 1, (50, 50, 60, 60), 0.95), det(1, 1, (0, 0, 10, 10), 0.9), det(1, 2, (20, 0, 30, 10), 0.8)]
    # class 1: TP=1, FP_U=1 -> 1.0; class 2: 0 -> per-class mean 50
    assert metrics.wilderness_impact(dets, ds, SPACE) == 50.0
    # pooled: recall 2/2 after all three -> 1 / 2
    assert metrics.wilderness_impact(dets, ds, SPACE, variant="pooled") == 50.0
    ds2 = make_dataset(SPACE, [1], [(1, 1, (0, 0, 10, 10)), (1, 2, (20, 0, 30, 10)), (1, 2, (40, 0, 50, 10)),
                                    (1, 2, (60, 0, 70, 10)), (1, 7, (50, 50, 60, 60))])
    dets2 = dets + [det(1, 2, (40, 0, 50, 10), 0.7), det(1, 2, (60, 0, 70, 10), 0.6)]
    assert metrics.wilderness_impact(dets2, ds2, SPACE) == 50.0
    assert metrics.wilderness_impact(dets2, ds2, SPACE, variant="pooled") == pytest.approx(100 / 4)


@given(st.integers(1, 50), st.integers(0, 50), st.integers(0, 50))
def test_wi_dual_forms_agree(tp, fpk, fpu):
    assert abs(metrics.wi_from_counts(tp, fpk, fpu) - metrics.wi_from_precisions(tp, fpk, fpu)) <= 1e-9


# --- A-OSE -----------------------------------------------------------------

def test_aose_examples():
    ds = make_dataset(SPACE, [1], [(1, 1, (0, 0, 10, 10)), (1, 7, (50, 50, 60, 60))])
    assert metrics.aose([det(1, 1, (0, 0, 10, 10), 0.9)], ds, SPACE) == 0
    assert metrics.aose([det(1, 2, (50, 50, 60, 60), 0.9)], ds, SPACE) == 1
    two = [det(1, 2, (50, 50, 60, 60), 0.9), det(1, 2, (50, 50, 60, 60), 0.8)]
    assert metrics.aose(two, ds, SPACE) == 1
    assert metrics.aose(two, ds, SPACE, mode="raw") == 2
    # different classes each consume the unknown box in their own sweep
    assert metrics.aose([det(1, 1, (50, 50, 60, 60), 0.9), det(1, 2, (50, 50, 60, 60), 0.8)], ds, SPACE) == 2
    # unknown-slot detections never count
    assert metrics.aose([det(1, U, (50, 50, 60, 60), 0.9)], ds, SPACE) == 0


def noisy_detections(dets, seed):
    rng = np.random.default_rng(seed)
    out = []
    for d in dets:
        x0, y0, x1, y1 = d.box.as_xyxy()
        jitter = rng.uniform(-8, 8, 4)
        b = box(x0 + jitter[0], y0 + jitter[1], max(x0 + jitter[0], x1 + jitter[2]), max(y0 + jitter[1], y1 + jitter[3]))
        slot = int(rng.integers(1, 5))
        out.append(Detection(d.image_id, slot, b, float(rng.uniform(0.01, 1))))
    return out


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([lambda s: s ** 3, lambda s: 0.5 * s, lambda s: s / (1 + s)]))
def test_aose_invariant_to_monotone_rescale(seed, fn):
    ds, perfect, space = synthetic_scene(8, seed=seed)
    dets = noisy_detections(perfect * 2, seed)
    rescaled = [Detection(d.image_id, d.class_slot, d.box, fn(d.score)) for d in dets]
    for mode in metrics.AOSE_MODES:
        assert metrics.aose(dets, ds, space, mode=mode) == metrics.aose(rescaled, ds, space, mode=mode)


# --- crowd and stray detections -------------------------------------------

def test_crowd_known_gt_is_ignored():
    ds = make_dataset(SPACE, [1], [(1, 1, (0, 0, 10, 10)), (1, 1, (20, 0, 30, 10), True)])
    dets = [det(1, 1, (20, 0, 30, 10), 0.9), det(1, 1, (0, 0, 10, 10), 0.8)]
    tally = metrics.match_dataset(dets, ds, SPACE)[0.5]
    assert tally.known[1].n_gt == 1
    assert sorted(tally.outcomes.tolist()) == [TP, IGNORED]
    assert list(tally.known[1].outcomes) == [TP]
    assert metrics.map_known(dets, ds, SPACE) == 100.0


def test_crowd_unknown_excluded_from_recall_but_counts_for_aose():
    ds = make_dataset(SPACE, [1], [(1, 1, (0, 0, 10, 10)), (1, 7, (50, 50, 60, 60), True), (1, 8, (80, 0, 90, 10))])
    dets = [det(1, U, (50, 50, 60, 60), 0.9), det(1, U, (80, 0, 90, 10), 0.8), det(1, 2, (50, 50, 60, 60), 0.7)]
    tally = metrics.match_dataset(dets, ds, SPACE)[0.5]
    assert tally.unknown.n_gt == 1
    assert metrics.unknown_recall(dets, ds, SPACE) == 100.0
    assert metrics.aose(dets, ds, SPACE) == 1


def test_detection_on_unannotated_image_is_fp():
    ds = make_dataset(SPACE, [1], [(1, 1, (0, 0, 10, 10))])
    dets = [det(1, 1, (0, 0, 10, 10), 0.9), det(99, 1, (0, 0, 10, 10), 0.95)]
    tally = metrics.match_dataset(dets, ds, SPACE)[0.5]
    assert list(tally.known[1].outcomes) == [FP_KNOWN, TP]
    assert any("99" in n for n in tally.notes)


def test_threshold_validation():
    ds = make_dataset(SPACE, [1], [(1, 1, (0, 0, 10, 10))])
    with pytest.raises(ParameterError):
        metrics.match_dataset([], ds, SPACE, (0.0,))


# --- evaluation report -----------------------------------------------------

def test_report_independent_of_threads():
    ds, perfect, space = synthetic_scene(40, seed=11)
    dets = noisy_detections(perfect * 3, 11)
    base = metrics.evaluate(dets, ds, space, threads=1)
    for n in (2, 4, 16):
        rep = metrics.evaluate(dets, ds, space, threads=n)
        assert rep.to_json() == base.to_json() and rep.to_csv() == base.to_csv()
        assert rep.pr_curves_csv() == base.pr_curves_csv()


def test_report_serializations():
    ds, perfect, space = synthetic_scene(10, seed=2)
    rep = metrics.evaluate(noisy_detections(perfect, 2), ds, space, config=metrics.EvalConfig(ap_variant="area"))
    d = rep.to_dict()
    assert d["format_version"] == metrics.REPORT_FORMAT_VERSION
    assert d["config"]["ap_variant"] == "area"
    for key in ("mAP_known", "U_AP", "U_Recall"):
        assert d["metrics"][key] is None or 0 <= d["metrics"][key] <= 100
    assert d["metrics"]["AOSE"] >= 0
    assert rep.to_csv().startswith("# osod-report/1 config=")
    assert rep.pr_curves_csv().splitlines()[1] == "class,rank,score,recall,precision"
    assert "A-OSE" in rep.summary_table()
    assert any("AP variant: area" in n for n in rep.notes)


def test_eval_config_validation():
    ds = make_dataset(SPACE, [1], [(1, 1, (0, 0, 10, 10))])
    for bad in (dict(ap_variant="x"), dict(wi_variant="x"), dict(aose_mode="x"), dict(wi_recall=0.0)):
        with pytest.raises(ParameterError):
            metrics.evaluate([], ds, SPACE, config=metrics.EvalConfig(**bad))


# --- embeddings ------------------------------------------------------------

def test_embedding_stats_example():
    recs = [metrics.EmbeddingRecord("A", (0, 0)), metrics.EmbeddingRecord("A", (2, 0)),
            metrics.EmbeddingRecord("B", (5, 0))]
    assert metrics.class_variances(recs) == {"A": 1.0, "B": 0.0}
    stats = metrics.embedding_stats(recs)
    assert stats.inter_class_distance == 4.0
    assert stats.intra_class_variance == 0.5


def test_embedding_stats_identical_points_and_errors():
    same = [metrics.EmbeddingRecord(c, (1.0, 2.0, 3.0)) for c in "AABB"]
    assert metrics.embedding_stats(same).intra_class_variance == 0.0
    with pytest.raises(UndefinedMetricError):
        metrics.embedding_stats(same[:2])
    with pytest.raises(ParameterError):
        metrics.embedding_stats([metrics.EmbeddingRecord("A", (1,)), metrics.EmbeddingRecord("B", (1, 2))])


@given(st.lists(st.tuples(st.sampled_from("ABC"), st.tuples(st.floats(-10, 10), st.floats(-10, 10))), min_size=2),
       st.floats(-100, 100), st.floats(-100, 100))
def test_embedding_stats_translation_invariant(rows, dx, dy):
    recs = [metrics.EmbeddingRecord(c, v) for c, v in rows]
    if len({c for c, _ in rows}) < 2:
        return
    moved = [metrics.EmbeddingRecord(c, (v[0] + dx, v[1] + dy)) for c, v in rows]
    a, b = metrics.embedding_stats(recs), metrics.embedding_stats(moved)
    assert math.isclose(a.intra_class_variance, b.intra_class_variance, rel_tol=1e-9, abs_tol=1e-9)
    assert math.isclose(a.inter_class_distance, b.inter_class_distance, rel_tol=1e-9, abs_tol=1e-9)


def test_read_embeddings(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text('{"class": "A", "vector": [1, 2]}\n\n{"class": "B", "vector": [3, 4]}\n')
    assert metrics.read_embeddings(p) == [metrics.EmbeddingRecord("A", (1, 2)), metrics.EmbeddingRecord("B", (3, 4))]
