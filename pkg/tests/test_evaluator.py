import numpy as np
import pytest

from tfakit.boxes import BBox
from tfakit.detections import Detection, load_detections, save_detections
from tfakit.evaluator import (
    METRIC_NAMES, EvalConfig, MetricsReport, average_precision, evaluate, load_report,
    match_detections, save_report,
)
from tfakit.exceptions import ValidationError

from conftest import make_dataset
from oracles import brute_ap, brute_mean


def _xyxy(*boxes):
    return np.array([BBox(*b).to_xyxy() for b in boxes])


class TestMatching:
    def test_single_tp(self):
        tp, ign = match_detections(_xyxy((0, 0, 10, 10)), _xyxy((0, 0, 10, 10)), 0.5)
        assert tp.tolist() == [[True]] and not ign.any()

    def test_second_detection_on_same_gt_is_fp(self):
        tp, _ = match_detections(_xyxy((0, 0, 10, 10), (1, 0, 10, 10)), _xyxy((0, 0, 10, 10)), 0.5)
        assert tp.tolist() == [[True, False]]

    def test_threshold_inclusive(self):
        # IoU of these two boxes is exactly 0.5
        tp, _ = match_detections(_xyxy((0, 0, 10, 5)), _xyxy((0, 0, 10, 10)), 0.5)
        assert tp.tolist() == [[True]]
        tp, _ = match_detections(_xyxy((0, 0, 10, 5)), _xyxy((0, 0, 10, 10)), 0.55)
        assert tp.tolist() == [[False]]

    def test_prefers_best_iou_then_lowest_index(self):
        gts = _xyxy((0, 0, 10, 10), (0, 0, 10, 10), (0, 0, 10, 8))
        tp, _ = match_detections(_xyxy((0, 0, 10, 10), (0, 0, 10, 10), (0, 0, 10, 10)), gts, 0.5)
        assert tp.tolist() == [[True, True, True]]

    def test_ignored_gt_used_only_as_fallback(self):
        gts = _xyxy((0, 0, 10, 10), (0, 0, 10, 9))
        tp, ign = match_detections(_xyxy((0, 0, 10, 10)), gts, 0.5, gt_ignore=[True, False])
        assert tp.tolist() == [[True]] and not ign.any()
        tp, ign = match_detections(_xyxy((0, 0, 10, 10)), gts[:1], 0.5, gt_ignore=[True])
        assert not tp.any() and ign.all()

    def test_vector_thresholds(self):
        tp, _ = match_detections(_xyxy((0, 0, 10, 7)), _xyxy((0, 0, 10, 10)), [0.5, 0.7, 0.75])
        assert tp[:, 0].tolist() == [True, True, False]


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([0.9, 0.8], [True, True], 2) == 1.0

    def test_no_detections(self):
        assert average_precision([], [], 3) == 0.0

    def test_fp_then_tp_is_half(self):
        assert average_precision([0.9, 0.5], [False, True], 1) == pytest.approx(0.5)

    def test_no_gt_is_absent(self):
        assert average_precision([0.9], [False], 0) is None

    def test_partial_recall(self):
        # recall reaches 0.5 with precision 1: 51 of 101 grid points
        assert average_precision([0.9], [True], 2) == pytest.approx(51 / 101)


def _two_class_dataset():
    return make_dataset({1: [(1, (0, 0, 10, 10)), (2, (50, 50, 100, 100))],
                         2: [(1, (20, 20, 40, 40))]}, n_classes=2, novel=(2,))


class TestEvaluate:
    def test_exact_detections_score_one(self):
        d = _two_class_dataset()
        dets = [Detection(a.image_id, a.category_id, a.bbox, 1.0) for a in d.annotations]
        report = evaluate(dets, d)
        for name in METRIC_NAMES:
            assert report[name] in (None, 1.0), name
        assert report["AP"] == 1.0 and report["nAP50"] == 1.0
        assert report["APs"] == report["APm"] == report["APl"] == 1.0

    def test_empty_detections_score_zero(self):
        report = evaluate([], _two_class_dataset())
        assert report["AP"] == 0.0 and report["bAP"] == 0.0 and report["nAP75"] == 0.0

    def test_unknown_category_rejected(self):
        d = _two_class_dataset()
        with pytest.raises(ValidationError):
            evaluate([Detection(1, 9, BBox(0, 0, 1, 1), 0.5)], d)

    def test_image_restriction_drops_other_images(self):
        d = _two_class_dataset()
        dets = [Detection(1, 1, BBox(0, 0, 10, 10), 0.9)]
        assert evaluate(dets, d, image_ids=[1])["bAP"] == 1.0
        assert evaluate(dets, d, image_ids=[1, 2])["bAP"] < 1.0

    def test_per_image_cap_applies_across_classes(self):
        d = _two_class_dataset()
        dets = [Detection(1, 2, BBox(60, 60, 5, 5), 0.99),
                Detection(1, 1, BBox(0, 0, 10, 10), 0.5)]
        capped = evaluate(dets, d, EvalConfig(max_dets_per_image=1), image_ids=[1])
        assert capped.per_class[1]["ap"] == 0.0

    def test_area_ranges(self):
        d = make_dataset({1: [(1, (0, 0, 10, 10)), (1, (100, 100, 50, 50))]}, n_classes=1)
        small_only = [Detection(1, 1, BBox(0, 0, 10, 10), 0.9)]
        r = evaluate(small_only, d)
        assert r["APs"] == 1.0 and r["APm"] == 0.0
        assert r["AP"] == pytest.approx(51 / 101)

    def test_permutation_invariance(self, rng):
        d = _two_class_dataset()
        dets = [Detection(1 + int(rng.integers(2)), 1 + int(rng.integers(2)),
                          BBox(*rng.uniform(0, 40, 2), *rng.uniform(5, 60, 2)),
                          float(rng.uniform())) for _ in range(15)]
        base = evaluate(dets, d).to_dict()
        shuffled = [dets[i] for i in rng.permutation(len(dets))]
        assert evaluate(shuffled, d).to_dict() == base

    def test_thresholds_validated(self):
        with pytest.raises(ValidationError):
            EvalConfig(iou_thresholds=(0.7, 0.5))
        with pytest.raises(ValidationError):
            EvalConfig(iou_thresholds=(0.0,))

    def test_report_and_detection_files_roundtrip(self, tmp_path):
        d = _two_class_dataset()
        dets = [Detection(1, 1, BBox(0, 0, 10, 10), 0.9)]
        save_detections(dets, tmp_path / "dets.json")
        assert load_detections(tmp_path / "dets.json") == dets
        report = evaluate(dets, d)
        save_report(report, tmp_path / "m.json")
        assert load_report(tmp_path / "m.json").to_dict() == report.to_dict()
        assert MetricsReport.from_dict(report.to_dict()).to_dict() == report.to_dict()


def random_scenario(rng):
    """Small random detection problem on an integer grid (exact IoU arithmetic)."""
    n_images = int(rng.integers(1, 6))
    n_classes = int(rng.integers(1, 4))

    def box():
        x, y = rng.integers(0, 12, 2)
        w, h = rng.integers(1, 9, 2)
        return (int(x), int(y), int(w), int(h))

    gts = {im: [(int(rng.integers(1, n_classes + 1)), box()) for _ in range(rng.integers(0, 4))]
           for im in range(1, n_images + 1)}
    d = make_dataset(gts, n_classes=n_classes)
    dets = []
    for _ in range(int(rng.integers(0, 11))):
        im = int(rng.integers(1, n_images + 1))
        if gts[im] and rng.uniform() < 0.6:
            cid, b = gts[im][rng.integers(len(gts[im]))]
            b = (max(0, b[0] + int(rng.integers(-1, 2))), b[1], b[2] + int(rng.integers(0, 2)), b[3])
        else:
            cid, b = int(rng.integers(1, n_classes + 1)), box()
        score = float(rng.integers(1, 6)) / 5 if rng.uniform() < 0.3 else float(rng.uniform())
        dets.append(Detection(im, cid, BBox(*b), score))
    return d, dets


def brute_evaluate(d, dets, thr):
    per_class = {}
    for cid in d.categories.ids:
        mine = [(i, det.image_id, det.score, det.bbox.to_list())
                for i, det in enumerate(dets) if det.category_id == cid]
        gts = [(a.image_id, a.bbox.to_list()) for a in d.annotations if a.category_id == cid]
        per_class[cid] = brute_ap(mine, gts, thr)
    return per_class, brute_mean(per_class.values())


def check_against_oracle(rng):
    d, dets = random_scenario(rng)
    thr = float(rng.choice(np.round(np.arange(0.5, 0.951, 0.05), 2)))
    report = evaluate(dets, d, EvalConfig(iou_thresholds=(thr,)))
    per_class, mean = brute_evaluate(d, dets, thr)
    worst = 0.0
    for cid, ref in per_class.items():
        got = report.per_class[cid]["ap"]
        if ref is None or got is None:
            assert ref is got, (cid, ref, got)
            continue
        worst = max(worst, abs(got - ref))
    if mean is None:
        assert report["AP"] is None
    else:
        worst = max(worst, abs(report["AP"] - mean))
    return worst


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(2024)
    assert max(check_against_oracle(rng) for _ in range(100)) <= 1e-9
