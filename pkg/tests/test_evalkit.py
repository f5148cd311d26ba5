import numpy as np
import pytest

from ovdkit.evalkit import (
    COCO_THRESHOLDS,
    DetectionRecord,
    EvalReport,
    GroundTruth,
    ap_at_iou,
    evaluate,
    map_range,
    recall_at_iou,
)
from ovdkit.geometry import Box

A = Box(0.25, 0.25, 0.2, 0.2)
B = Box(0.75, 0.75, 0.2, 0.2)
C = Box(0.25, 0.75, 0.2, 0.2)
NOWHERE = Box(0.75, 0.25, 0.1, 0.1)


def det(box, conf, cat=0, image=0):
    return DetectionRecord(image, box, cat, conf)


def gt(box, cat=0, image=0):
    return GroundTruth(image, box, cat)


class TestMicroScenes:
    def test_perfect(self):
        gts = [gt(A), gt(B)]
        dets = [det(A, 0.9), det(B, 0.8)]
        assert ap_at_iou(dets, gts, 0.5) == {0: 1.0}
        assert map_range(dets, gts) == 1.0

    def test_duplicate_after_both_hits(self):
        gts = [gt(A), gt(B)]
        dets = [det(A, 0.9), det(B, 0.8), det(A, 0.7)]
        # TP, TP, FP: the envelope stays at 1 up to full recall.
        assert ap_at_iou(dets, gts, 0.5)[0] == 1.0
        assert recall_at_iou({0: [d.box for d in dets]}, {0: [A, B]}, 0.5) == 1.0

    def test_false_positive_first(self):
        dets = [det(NOWHERE, 0.9), det(A, 0.8)]
        # Precision 1/2 at recall 1, so every recall point samples 0.5.
        assert ap_at_iou(dets, [gt(A)], 0.5)[0] == pytest.approx(0.5, abs=1e-15)

    def test_tp_fp_tp(self):
        dets = [det(A, 0.9), det(NOWHERE, 0.8), det(B, 0.7)]
        # 51 points at precision 1 (recall <= 0.5) and 50 at 2/3.
        assert ap_at_iou(dets, [gt(A), gt(B)], 0.5)[0] == pytest.approx(253 / 303, abs=1e-12)

    def test_threshold_and_missing_category(self):
        # Same size, shifted by half a width: IoU = 0.1*0.2 / (0.08 - 0.02) = 1/3.
        shifted = Box(A.cx + 0.1, A.cy, 0.2, 0.2)
        gts = [gt(A), gt(B, cat=1)]
        dets = [det(shifted, 0.9)]
        at50 = ap_at_iou(dets, gts, 0.5)
        assert at50 == {0: 0.0, 1: 0.0}
        at30 = ap_at_iou(dets, gts, 0.3)
        assert at30 == {0: 1.0, 1: 0.0}


class TestRecall:
    def test_two_of_three(self):
        assert recall_at_iou({0: [A, B]}, {0: [A, B, C]}, 0.5) == pytest.approx(2 / 3)

    def test_one_to_one(self):
        assert recall_at_iou({0: [A]}, {0: [A, A]}, 0.5) == 0.5

    def test_no_ground_truth(self):
        assert recall_at_iou({0: [A]}, {}, 0.5) == 0.0

    def test_greedy_by_iou(self):
        near_a = Box(A.cx + 0.01, A.cy, 0.2, 0.2)
        assert recall_at_iou({0: [near_a, A]}, {0: [A, near_a]}, 0.9) == 1.0


def random_scene(rng, n_images=4, n_cats=3):
    gts, dets = [], []
    for img in range(n_images):
        for _ in range(int(rng.integers(1, 5))):
            box = Box(*rng.uniform([0.2, 0.2, 0.05, 0.05], [0.8, 0.8, 0.3, 0.3]))
            cat = int(rng.integers(n_cats))
            gts.append(gt(box, cat, img))
            if rng.uniform() < 0.8:
                jitter = rng.normal(0, 0.03, 4)
                moved = Box.clamped(*(box.to_array() + jitter))
                dets.append(det(moved, float(rng.uniform()), cat, img))
        for _ in range(int(rng.integers(0, 3))):
            junk = Box(*rng.uniform([0.1, 0.1, 0.05, 0.05], [0.9, 0.9, 0.3, 0.3]))
            dets.append(det(junk, float(rng.uniform()), int(rng.integers(n_cats)), img))
    return dets, gts


class TestProperties:
    def test_map_is_mean_over_thresholds(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            dets, gts = random_scene(rng)
            manual = np.mean([np.mean(list(ap_at_iou(dets, gts, t).values())) for t in COCO_THRESHOLDS])
            assert map_range(dets, gts) == pytest.approx(manual, abs=1e-12)

    def test_order_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            dets, gts = random_scene(rng)
            perm = rng.permutation(len(dets))
            shuffled = [dets[i] for i in perm]
            gperm = [gts[i] for i in rng.permutation(len(gts))]
            assert ap_at_iou(shuffled, gperm, 0.5) == ap_at_iou(dets, gts, 0.5)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            dets, gts = random_scene(rng)
            values = [np.mean(list(ap_at_iou(dets, gts, t).values())) for t in COCO_THRESHOLDS]
            assert np.all(np.diff(values) <= 1e-12)

    def test_lowest_confidence_false_positive_never_helps(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            dets, gts = random_scene(rng)
            before = ap_at_iou(dets, gts, 0.5)
            after = ap_at_iou(dets + [det(NOWHERE, 0.0, 0, 99)], gts, 0.5)
            for c in before:
                assert after[c] <= before[c]

    def test_max_dets_cap(self):
        dets = [det(NOWHERE, 0.9), det(NOWHERE, 0.8), det(A, 0.7)]
        assert ap_at_iou(dets, [gt(A)], 0.5, max_dets=2)[0] == 0.0
        assert ap_at_iou(dets, [gt(A)], 0.5, max_dets=3)[0] > 0.0

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            ap_at_iou([], [gt(A)], 0.0)

    def test_confidence_range(self):
        with pytest.raises(ValueError):
            det(A, 1.5)


class TestEvaluate:
    def test_groups(self):
        gts = [gt(A, 0), gt(B, 1), gt(C, 2)]
        dets = [det(A, 0.9, 0), det(B, 0.9, 1), det(NOWHERE, 0.5, 2)]
        report = evaluate(dets, gts, base=[0, 1], novel=[2])
        assert report.ap50 == {"novel": 0.0, "base": 1.0, "all": pytest.approx(2 / 3)}
        assert report.ar50["novel"] == 0.0 and report.ar50["base"] == 1.0
        assert report.counts["gt_novel"] == 1
        back = EvalReport.from_dict(report.to_dict())
        assert back == report
        assert "novel" in report.table({0: "cat", 1: "dog", 2: "zebra"})
        assert "zebra" in report.table({0: "cat", 1: "dog", 2: "zebra"})

    def test_detection_json(self):
        d = det(A, 0.25, 3, "img7")
        assert DetectionRecord.from_dict(d.to_dict()) == d
