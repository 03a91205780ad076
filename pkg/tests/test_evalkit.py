import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carfit3d.evalkit import (
    Difficulty,
    EvalConfig,
    Frame,
    GroundTruth,
    NoGroundTruth,
    assign_difficulty,
    average_precision,
    evaluate,
    ground_truth_from_labels,
    interpolated_ap,
    match_detections,
    mean_best_iou,
    pr_curve,
)
from carfit3d.geometry import Box2, Box3, Detection, iou_3d, iou_bev
from carfit3d.kitti_io import LabelRecord

from .strategies import box_pairs

A = Box3((10.0, 0.0, -0.9), 1.5, 4.0, 2.0, 0.0)
B = Box3((20.0, 5.0, -0.9), 1.5, 4.0, 2.0, 0.0)


def shifted(box, s):
    """``box`` moved ``s`` metres along its length: BEV IoU (l - s) / (l + s)."""
    return box.replace(center=(box.center[0] + s, box.center[1], box.center[2]))


def det(box, score):
    return Detection(box, score)


def record(height, occ, trunc, cls="Car"):
    return LabelRecord(cls, trunc, occ, 0.0, Box2(100, 100, 150, 100 + height), (1.5, 4.0, 1.7), (0, 1, 10), 0)


class TestDifficulty:
    def test_easy(self):
        assert assign_difficulty(record(45, 0, 0.0)) is Difficulty.EASY

    def test_moderate(self):
        assert assign_difficulty(record(30, 1, 0.2)) is Difficulty.MODERATE

    def test_ignored(self):
        assert assign_difficulty(record(20, 0, 0.0)) is None

    def test_hard(self):
        assert assign_difficulty(record(30, 2, 0.45)) is Difficulty.HARD

    def test_neighbour_classes(self, calib):
        gts = ground_truth_from_labels([record(45, 0, 0), record(45, 0, 0, "Van"), record(45, 0, 0, "Pedestrian")], calib)
        assert [g.neighbour for g in gts] == [False, True]


class TestMatching:
    def test_perfect(self):
        m = match_detections([det(A, 1.0), det(B, 1.0)], [A, B])
        assert m.tp.all() and m.fn == 0

    def test_duplicate(self):
        m = match_detections([det(A, 0.4), det(A, 0.9)], [A])
        assert m.tp.tolist() == [False, True] and m.fp.tolist() == [True, False]

    def test_hand_case(self):
        d = [det(shifted(A, 4 / 9), 0.9), det(shifted(A, 1.0), 0.8), det(shifted(A, 12 / 7), 0.7)]
        ious = [iou_bev(x.box, A) for x in d]
        assert ious == pytest.approx([0.8, 0.6, 0.4], abs=1e-12)
        m = match_detections(d, [A, B], EvalConfig(0.5))
        assert m.tp.tolist() == [True, False, False]
        assert m.fp.tolist() == [False, True, True]
        assert m.fn == 1

    def test_dont_care(self):
        gts = [GroundTruth(A), GroundTruth(B, Difficulty.EASY, neighbour=True)]
        m = match_detections([det(A, 0.9), det(B, 0.8)], gts)
        assert m.tp.tolist() == [True, False] and m.fp.tolist() == [False, False]
        assert m.n_gt == 1

    def test_groups_are_cumulative(self):
        gts = [GroundTruth(A, Difficulty.EASY), GroundTruth(B, Difficulty.HARD)]
        assert match_detections([], gts, difficulty=Difficulty.EASY).n_gt == 1
        assert match_detections([], gts, difficulty=Difficulty.HARD).n_gt == 2
        m = match_detections([det(B, 0.5)], gts, difficulty=Difficulty.MODERATE)
        assert not m.tp[0] and not m.fp[0]

    def test_ignored_gt_never_counts(self):
        m = match_detections([det(A, 0.5)], [GroundTruth(A, None)])
        assert m.n_gt == 0 and not m.fp[0]

    def test_stable_ties(self):
        m = match_detections([det(A, 0.5), det(A, 0.5)], [A])
        assert m.tp.tolist() == [True, False]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EvalConfig(mode="2d")
        with pytest.raises(ValueError):
            EvalConfig(points=12)


class TestAP:
    def test_hand_staircase(self):
        d = [det(A, 0.9), det(shifted(B, 3.0), 0.8), det(B, 0.7)]
        m = match_detections(d, [A, B])
        r, p = pr_curve([m])
        np.testing.assert_allclose(r, [0.5, 0.5, 1.0])
        np.testing.assert_allclose(p, [1.0, 0.5, 2 / 3])
        ap = average_precision([m])
        assert ap == pytest.approx((6 + 5 * 2 / 3) / 11, abs=1e-9)
        assert ap == pytest.approx(0.8485, abs=5e-5)

    def test_perfect(self):
        assert average_precision([match_detections([det(A, 1), det(B, 1)], [A, B])]) == 1.0
        assert average_precision([match_detections([det(A, 1), det(B, 1)], [A, B])], EvalConfig(points=40)) == 1.0

    def test_nothing(self):
        assert average_precision([match_detections([], [A, B])]) == 0.0

    def test_no_gt(self):
        with pytest.raises(NoGroundTruth):
            pr_curve([match_detections([det(A, 1)], [])])

    def test_40_point_skips_zero(self):
        r, p = np.array([0.5, 1.0]), np.array([1.0, 0.5])
        assert interpolated_ap(r, p, 40) == pytest.approx((20 * 1.0 + 20 * 0.5) / 40)
        assert interpolated_ap(r, p, 11) == pytest.approx((6 * 1.0 + 5 * 0.5) / 11)

    @given(st.lists(st.tuples(st.booleans(), st.floats(0, 1)), min_size=1, max_size=12))
    def test_trailing_false_positive_never_helps(self, spec):
        gts = [A.replace(center=(10.0 + 10 * i, 0.0, -0.9)) for i in range(len(spec))]
        far = A.replace(center=(-50.0, 0.0, -0.9))
        dets = [det(g if hit else far, 0.5 + 0.5 * s) for g, (hit, s) in zip(gts, spec)]
        base = average_precision([match_detections(dets, gts)])
        worse = average_precision([match_detections(dets + [det(far, 0.01)], gts)])
        assert worse <= base
        assert 0.0 <= base <= 1.0

    @given(box_pairs())
    @settings(max_examples=80)
    def test_bev_equals_3d_for_shared_heights(self, pair):
        a, b = pair
        b = b.replace(center=(b.center[0], b.center[1], a.center[2]), h=a.h)
        assert iou_3d(a, b) == pytest.approx(iou_bev(a, b), abs=1e-12)


class TestEvaluate:
    def test_report(self):
        frames = [Frame([det(A, 0.9)], [GroundTruth(A)]), Frame([det(B, 0.8)], [GroundTruth(B, Difficulty.HARD)])]
        rep = evaluate(frames, thresholds=(0.5, 0.7), modes=("bev", "3d"))
        assert rep.ap[("bev", 0.5, "easy")] == 1.0
        assert rep.ap[("3d", 0.7, "hard")] == 1.0
        assert "ap.bev.0.5.moderate = 1.000000" in rep.key_values()
        assert rep.text_table().splitlines()[1].startswith("AP_3d@0.5")
        assert rep.pr_points().startswith("# mode")

    def test_empty_group_is_nan(self):
        rep = evaluate([Frame([det(A, 0.9)], [GroundTruth(A, Difficulty.HARD)])], thresholds=(0.5,), modes=("bev",))
        assert math.isnan(rep.ap[("bev", 0.5, "easy")])
        assert "n/a" in rep.text_table()

    def test_mean_best_iou(self):
        frames = [Frame([det(shifted(A, 1.0), 0.9), det(B, 0.5)], [A, B])]
        assert mean_best_iou(frames) == pytest.approx((0.6 + 1.0) / 2)
