"""Metric-suite tests: formula exactness plus brute-force sweep oracles.

The FROC and operating-point implementations use a single-pass prefix trick;
the oracles here re-run full greedy matching independently at every distinct
score threshold and must agree exactly.
"""

import numpy as np
import pytest

from dghm.metrics import (
    EVAL_IOU,
    FROC_LEVELS,
    DetectionResult,
    MatchReport,
    MetricsReport,
    aggregate_match,
    decode_and_suppress,
    decode_boxes,
    froc,
    match_detections,
    mean_np_detections,
    nfps,
    nfps_from_w,
    operating_point,
    precision,
    read_report,
    recall,
    t_r_recall,
    write_report,
)
from dghm.simdata import Box


def det(scene, cx, cy, w, h, score):
    return DetectionResult(scene_id=scene, box=Box(cx, cy, w, h), score=score)


def random_detection_sets(seed, n_sets):
    """Random scenes/gts/detections exercising ties, empty scenes, NP scenes."""
    rng = np.random.default_rng(seed)
    for _ in range(n_sets):
        n_scenes = int(rng.integers(2, 6))
        np_ids = list(range(n_scenes, n_scenes + int(rng.integers(1, 4))))
        gt_by_scene = {}
        dets = []
        for sid in range(n_scenes):
            gts = []
            for _ in range(int(rng.integers(0, 5))):
                gts.append(Box(rng.uniform(5, 55), rng.uniform(5, 55),
                               rng.uniform(4, 10), rng.uniform(4, 10)))
            gt_by_scene[sid] = gts
        for sid in list(range(n_scenes)) + np_ids:
            for _ in range(int(rng.integers(0, 8))):
                base = None
                if gt_by_scene.get(sid) and rng.uniform() < 0.6:
                    base = gt_by_scene[sid][int(rng.integers(len(gt_by_scene[sid])))]
                if base is not None:
                    box = Box(base.cx + rng.normal(0, 2), base.cy + rng.normal(0, 2),
                              max(base.w + rng.normal(0, 1), 1.0),
                              max(base.h + rng.normal(0, 1), 1.0))
                else:
                    box = Box(rng.uniform(5, 55), rng.uniform(5, 55),
                              rng.uniform(4, 10), rng.uniform(4, 10))
                # quantized scores so ties occur
                score = float(np.round(rng.uniform(), 2))
                dets.append(DetectionResult(scene_id=sid, box=box, score=score))
        yield dets, gt_by_scene, np_ids


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


def test_perfect_match():
    gts = [Box(10, 10, 6, 6), Box(30, 30, 6, 6)]
    dets = [det(0, 10, 10, 6, 6, 0.9), det(0, 30, 30, 6, 6, 0.8)]
    rep = match_detections(dets, gts)
    assert (rep.tp, rep.fp, rep.fn) == (2, 0, 0)


def test_no_detections():
    rep = match_detections([], [Box(10, 10, 6, 6)] * 3)
    assert (rep.tp, rep.fp, rep.fn) == (0, 0, 3)


def test_two_matched_one_stray():
    gts = [Box(10, 10, 6, 6), Box(30, 30, 6, 6), Box(50, 50, 6, 6)]
    dets = [det(0, 10, 10, 6, 6, 0.9), det(0, 30, 30, 6, 6, 0.8),
            det(0, 5, 50, 3, 3, 0.7)]
    rep = match_detections(dets, gts)
    assert (rep.tp, rep.fp, rep.fn) == (2, 1, 1)


def test_matching_is_one_to_one():
    # two detections on one gt: only the higher-scored one claims it
    gts = [Box(10, 10, 6, 6)]
    dets = [det(0, 10, 10, 6, 6, 0.9), det(0, 10.5, 10, 6, 6, 0.8)]
    rep = match_detections(dets, gts)
    assert (rep.tp, rep.fp, rep.fn) == (1, 1, 0)


def test_matching_respects_iou_threshold():
    gts = [Box(10, 10, 6, 6)]
    dets = [det(0, 20, 20, 6, 6, 0.9)]  # zero overlap
    rep = match_detections(dets, gts)
    assert (rep.tp, rep.fp, rep.fn) == (0, 1, 1)


def test_aggregate_match_counts_np_scene_fp():
    gt_by_scene = {0: [Box(10, 10, 6, 6)]}
    dets = [det(0, 10, 10, 6, 6, 0.9), det(5, 10, 10, 6, 6, 0.8)]
    rep = aggregate_match(dets, gt_by_scene)
    assert (rep.tp, rep.fp, rep.fn) == (1, 1, 0)


# ---------------------------------------------------------------------------
# scalar metrics
# ---------------------------------------------------------------------------


def test_recall_precision_formulas():
    rep = MatchReport(tp=3, fp=2, fn=1)
    assert recall(rep) == (0.75, False)
    assert precision(rep) == (0.6, False)


def test_recall_precision_zero_denominators_flagged():
    assert recall(MatchReport(tp=0, fp=5, fn=0)) == (0.0, True)
    assert precision(MatchReport(tp=0, fp=0, fn=5)) == (0.0, True)


def test_perfect_scores():
    rep = MatchReport(tp=4, fp=0, fn=0)
    assert recall(rep)[0] == 1.0
    assert precision(rep)[0] == 1.0


def test_nfps_formula_and_clamp():
    assert nfps_from_w(0.0) == 100.0
    assert nfps_from_w(100.0) == 0.0
    assert nfps_from_w(150.0) == 0.0
    assert nfps_from_w(0.08) == pytest.approx(99.92)


def test_nfps_thresholding():
    dets = [det(7, 10, 10, 4, 4, 0.9), det(7, 20, 20, 4, 4, 0.4),
            det(8, 30, 30, 4, 4, 0.6)]
    assert nfps(dets, [7, 8], threshold=0.5) == pytest.approx(100 - 1.0)
    assert nfps(dets, [7, 8], threshold=0.0) == pytest.approx(100 - 1.5)


def test_mean_np_detections_requires_np_scene():
    with pytest.raises(ValueError):
        mean_np_detections([], [])


# ---------------------------------------------------------------------------
# FROC
# ---------------------------------------------------------------------------


def brute_force_froc(dets, gt_by_scene, np_scene_ids, levels=FROC_LEVELS):
    """Re-run full matching at every distinct threshold; average best recalls."""
    total_gt = sum(len(v) for v in gt_by_scene.values())
    if not dets or total_gt == 0:
        return 0.0
    np_ids = set(np_scene_ids)
    thresholds = sorted({d.score for d in dets}, reverse=True)
    recalls, ws = [], []
    for thr in thresholds:
        above = [d for d in dets if d.score >= thr]
        rep = aggregate_match([d for d in above if d.scene_id not in np_ids],
                              gt_by_scene)
        recalls.append(rep.tp / total_gt)
        ws.append(sum(1 for d in above if d.scene_id in np_ids) / len(np_ids))
    values = []
    for level in levels:
        feasible = [r for r, w in zip(recalls, ws) if w <= level]
        values.append(max(feasible) if feasible else 0.0)
    return float(np.mean(values))


def brute_force_operating_point(dets, gt_by_scene, min_precision=0.2):
    thresholds = sorted({d.score for d in dets}, reverse=True)
    best_thr, best_prec = None, -1.0
    for thr in thresholds:
        above = [d for d in dets if d.score >= thr]
        rep = aggregate_match(above, gt_by_scene)
        prec = rep.tp / max(rep.tp + rep.fp, 1)
        if prec >= min_precision:
            best_thr = thr  # keep going: we want the lowest qualifying threshold
        if prec > best_prec:
            best_prec, best_fallback = prec, thr
    if best_thr is not None:
        return best_thr, False
    return best_fallback, True


def test_froc_simple_mean():
    # recalls 0.5..1.0 achieved exactly at W = 1, 2, 4, 8, 16, 32
    gts = {0: [Box(8 * i + 4, 8, 4, 4) for i in range(10)]}
    scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
    hits = [5, 6, 7, 8, 9, 10]  # cumulative TP at each score step
    dets = []
    prev = 0
    for s, nhit in zip(scores, hits):
        for j in range(prev, nhit):
            dets.append(det(0, 8 * j + 4, 8, 4, 4, s))
        prev = nhit
    # NP detections so that W reaches each level exactly at the same scores
    cum = 0
    for s, target in zip(scores, FROC_LEVELS):
        for _ in range(target - cum):
            dets.append(det(99, 30, 30, 4, 4, s))
        cum = target
    value = froc(dets, gts, [99])
    assert value == pytest.approx(brute_force_froc(dets, gts, [99]))
    assert value == pytest.approx(np.mean([0.5, 0.6, 0.7, 0.8, 0.9, 1.0]))


def test_froc_zero_fp_detector():
    gts = {0: [Box(10, 10, 6, 6)]}
    dets = [det(0, 10, 10, 6, 6, 0.9)]
    assert froc(dets, gts, [5]) == 1.0


def test_froc_empty_detections():
    assert froc([], {0: [Box(10, 10, 6, 6)]}, [5]) == 0.0


def test_froc_range_property():
    for dets, gts, np_ids in random_detection_sets(21, 20):
        if not np_ids:
            continue
        v = froc(dets, gts, np_ids)
        assert 0.0 <= v <= 1.0


def test_froc_matches_brute_force_100_random_sets():
    for dets, gts, np_ids in random_detection_sets(42, 100):
        fast = froc(dets, gts, np_ids)
        slow = brute_force_froc(dets, gts, np_ids)
        assert fast == pytest.approx(slow, abs=1e-12), (fast, slow)


def test_operating_point_matches_brute_force_100_random_sets():
    checked = 0
    for dets, gts, np_ids in random_detection_sets(1234, 100):
        if not dets:
            continue
        fast_thr, fast_flag = operating_point(dets, gts)
        slow_thr, slow_flag = brute_force_operating_point(dets, gts)
        assert fast_flag == slow_flag
        assert fast_thr == pytest.approx(slow_thr, abs=1e-12)
        checked += 1
    assert checked >= 90


def test_operating_point_perfect_detector():
    gts = {0: [Box(10, 10, 6, 6)]}
    dets = [det(0, 10, 10, 6, 6, 0.05)]
    thr, flagged = operating_point(dets, gts)
    assert thr == pytest.approx(0.05)
    assert not flagged


def test_operating_point_all_fp_flagged():
    gts = {0: [Box(10, 10, 6, 6)]}
    dets = [det(0, 40, 40, 3, 3, s) for s in (0.9, 0.8)]
    thr, flagged = operating_point(dets, gts, min_precision=0.2)
    assert flagged


def test_operating_point_empty_rejected():
    with pytest.raises(ValueError):
        operating_point([], {})


def test_monotone_curves_property():
    for dets, gts, np_ids in random_detection_sets(77, 10):
        if not dets or not np_ids:
            continue
        thresholds = sorted({d.score for d in dets})
        total_gt = sum(len(v) for v in gts.values())
        prev_rec, prev_w = 2.0, float("inf")
        for thr in thresholds:  # increasing thresholds
            above = [d for d in dets if d.score >= thr]
            rep = aggregate_match([d for d in above if d.scene_id not in set(np_ids)], gts)
            rec = rep.tp / total_gt if total_gt else 0.0
            w = sum(1 for d in above if d.scene_id in set(np_ids)) / len(np_ids)
            assert rec <= prev_rec + 1e-12
            assert w <= prev_w
            prev_rec, prev_w = rec, w


# ---------------------------------------------------------------------------
# T-recall / R-recall
# ---------------------------------------------------------------------------


def test_t_r_recall_empty_removed_flagged():
    dets = [det(0, 10, 10, 6, 6, 0.9)]
    t, r, flagged = t_r_recall(dets, {0: [Box(10, 10, 6, 6)]}, {}, threshold=0.5)
    assert t == 1.0 and r is None and flagged


def test_t_r_recall_independent_pools():
    kept = {0: [Box(10, 10, 6, 6)]}
    removed = {0: [Box(30, 30, 6, 6)]}
    dets = [det(0, 10, 10, 6, 6, 0.9), det(0, 30, 30, 6, 6, 0.8)]
    t, r, flagged = t_r_recall(dets, kept, removed, threshold=0.5)
    assert t == 1.0 and r == 1.0 and not flagged


def test_t_r_recall_annotated_only_detector():
    kept = {0: [Box(10, 10, 6, 6)]}
    removed = {0: [Box(30, 30, 6, 6)], 1: [Box(40, 40, 6, 6)]}
    dets = [det(0, 10, 10, 6, 6, 0.9)]
    t, r, flagged = t_r_recall(dets, kept, removed, threshold=0.5)
    assert t == 1.0 and r == 0.0 and not flagged


def test_t_r_recall_threshold_applied():
    kept = {0: [Box(10, 10, 6, 6)]}
    dets = [det(0, 10, 10, 6, 6, 0.3)]
    t, _, _ = t_r_recall(dets, kept, {0: [Box(30, 30, 6, 6)]}, threshold=0.5)
    assert t == 0.0


# ---------------------------------------------------------------------------
# decoding and suppression
# ---------------------------------------------------------------------------


def test_decode_boxes_identity_and_offsets():
    anchors = np.array([[10.0, 10.0, 8.0, 8.0]])
    np.testing.assert_allclose(decode_boxes(anchors, np.zeros((1, 4))), anchors)
    out = decode_boxes(anchors, np.array([[0.5, -0.25, np.log(2.0), 0.0]]))
    np.testing.assert_allclose(out, [[14.0, 8.0, 16.0, 8.0]])


def test_decode_boxes_clips_log_scale():
    anchors = np.array([[10.0, 10.0, 8.0, 8.0]])
    out = decode_boxes(anchors, np.array([[0.0, 0.0, 100.0, -100.0]]))
    assert out[0, 2] == pytest.approx(8.0 * np.exp(4.0))
    assert out[0, 3] == pytest.approx(8.0 * np.exp(-4.0))


def test_suppress_empty():
    assert decode_and_suppress(np.zeros((0, 4)), np.zeros(0, dtype=int),
                               np.zeros(0), np.zeros((0, 4))) == []


def test_suppress_duplicates():
    anchors = np.array([[10.0, 10.0, 8.0, 8.0], [10.0, 10.0, 8.0, 8.0]])
    dets = decode_and_suppress(anchors, np.array([0, 0]), np.array([0.8, 0.9]),
                               np.zeros((2, 4)))
    assert len(dets) == 1
    assert dets[0].score == pytest.approx(0.9)


def test_suppress_keeps_disjoint_and_cross_scene():
    anchors = np.array([[10.0, 10.0, 8.0, 8.0], [40.0, 40.0, 8.0, 8.0],
                        [10.0, 10.0, 8.0, 8.0]])
    dets = decode_and_suppress(anchors, np.array([0, 0, 1]),
                               np.array([0.9, 0.8, 0.7]), np.zeros((3, 4)))
    assert len(dets) == 3  # disjoint within scene 0; scene 1 is independent


def test_suppress_score_threshold():
    anchors = np.array([[10.0, 10.0, 8.0, 8.0], [40.0, 40.0, 8.0, 8.0]])
    dets = decode_and_suppress(anchors, np.array([0, 0]), np.array([0.9, 0.1]),
                               np.zeros((2, 4)), score_threshold=0.5)
    assert len(dets) == 1


def test_detection_score_validated():
    with pytest.raises(ValueError):
        DetectionResult(scene_id=0, box=Box(1, 1, 1, 1), score=1.5)


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------


def test_report_round_trip(tmp_path):
    rep = MetricsReport(recall=0.8125, precision=0.4, nfps=99.92, froc=0.7321,
                        t_recall=0.9, r_recall=None, threshold=0.3125,
                        flags=["r_recall_undefined"])
    path = tmp_path / "report.txt"
    write_report(path, rep)
    loaded = read_report(path)
    assert loaded == rep
    text = path.read_text()
    assert "r_recall=undefined" in text
    assert text.splitlines()[0].startswith("recall=")
