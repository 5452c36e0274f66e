import math

import numpy as np
import pytest

from petrlite.harness.metrics import (Detection, GroundTruth, compute_metrics,
                                      interpolated_ap)


def gt(scene, cls, x, y):
    return GroundTruth(scene, cls, np.array([x, y, 0.0]))


def det(scene, cls, score, x, y):
    return Detection(scene, cls, score, np.array([x, y, 0.0]))


def test_perfect_detector():
    gts = [gt(0, 0, 1, 2), gt(0, 1, -3, 4), gt(1, 0, 5, 5)]
    dets = [det(g.scene, g.class_id, 1.0, *g.center[:2]) for g in gts]
    rep = compute_metrics(dets, gts)
    assert all(v == 1.0 for v in rep.ap.values())
    assert rep.mean_ap == 1.0 and rep.mean_translation_error == 0.0


def test_no_predictions():
    rep = compute_metrics([], [gt(0, 0, 1, 1)])
    assert rep.mean_ap == 0.0
    assert math.isnan(rep.mean_translation_error)


def test_offset_hits_only_loose_thresholds():
    gts = [gt(0, 0, 0, 0)]
    rep = compute_metrics([det(0, 0, 0.9, 1.5, 0.0)], gts)
    assert rep.ap == {0.5: 0.0, 1.0: 0.0, 2.0: 1.0, 4.0: 1.0}
    assert rep.mean_ap == 0.5
    assert rep.mean_translation_error == pytest.approx(1.5)


def test_height_ignored_and_class_respected():
    g = gt(0, 0, 0, 0)
    rep = compute_metrics([Detection(0, 0, 0.5, np.array([0.0, 0.0, 3.0]))], [g])
    assert rep.mean_ap == 1.0
    assert compute_metrics([det(0, 1, 0.5, 0, 0)], [g]).mean_ap == 0.0


def test_scene_boundaries_respected():
    rep = compute_metrics([det(1, 0, 0.9, 0, 0)], [gt(0, 0, 0, 0)])
    assert rep.mean_ap == 0.0


def test_hand_enumerated_ap():
    # ranked TP, FP, TP against 2 ground truths: precision 1, 1/2, 2/3
    tp = np.array([True, False, True])
    # recall >= 0..0.5 -> max precision 1 (6 points), > 0.5 .. 1 -> 2/3 (5 points)
    assert interpolated_ap(tp, 2) == pytest.approx((6 * 1 + 5 * 2 / 3) / 11)


def test_duplicate_is_false_positive():
    gts = [gt(0, 0, 0, 0)]
    rep = compute_metrics([det(0, 0, 0.9, 0.1, 0), det(0, 0, 0.8, 0, 0.1)], gts)
    assert rep.ap[0.5] == 1.0  # the duplicate ranks below the recall-1 point
    rep = compute_metrics([det(0, 0, 0.9, 5, 5), det(0, 0, 0.8, 0, 0)], gts)
    assert rep.ap[0.5] == pytest.approx(0.5)


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(0)
    gts = [gt(s, int(rng.integers(2)), *rng.uniform(-10, 10, 2)) for s in range(10)]
    dets = [det(g.scene, g.class_id, float(rng.uniform()), *(g.center[:2] + rng.normal(0, 1.5, 2)))
            for g in gts]
    rep = compute_metrics(dets, gts)
    vals = [rep.ap[t] for t in sorted(rep.ap)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert all(0.0 <= v <= 1.0 for v in vals)
