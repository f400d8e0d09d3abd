"""Tests for VOC07 matching, 11-point AP, mAP reports and mask diagnostics."""

import json
from fractions import Fraction

import numpy as np
import pytest

from data_model import Annotation, BoundingBox, ClassCatalog, Detection, ScoreMask, iou
from errors import EvaluationError, InvalidInputError
from evaluation import (
    MASK_DIAGNOSTICS_CSV,
    MASK_DIAGNOSTICS_JSON,
    PR_CURVES_CSV,
    PR_CURVES_HTML,
    RECALL_LEVELS,
    REPORT_CSV,
    REPORT_JSON,
    EvalConfig,
    average_precision_voc07,
    compare_masks,
    false_positive_pixels,
    mask_pixel_accuracy,
    match_detections,
    mean_ap,
    precision_recall,
    write_mask_diagnostics,
    write_report,
)


def _gt(box, class_id=1, image_id='img'):
    return Annotation(image_id=image_id, class_id=class_id, box=BoundingBox(*box))


def _det(score, box, class_id=1, image_id='img'):
    return Detection(image_id=image_id, class_id=class_id, box=BoundingBox(*box), score=score)


def _exact_ap(flags, num_gt):
    """11-point AP by exhaustive counting at every rank, in exact arithmetic."""
    points = []
    for k in range(1, len(flags) + 1):
        tp = sum(flags[:k])
        points.append((Fraction(tp, num_gt), Fraction(tp, k)))
    total = Fraction(0)
    for level in range(11):
        reached = [p for r, p in points if r >= Fraction(level, 10)]
        total += max(reached) if reached else 0
    return total / 11


def _reference_map(detections, annotations, threshold):
    labels = sorted({a.class_id for a in annotations})
    aps = []
    for label in labels:
        gts = [a for a in annotations if a.class_id == label]
        taken = [False] * len(gts)
        ranked = sorted((d for d in detections if d.class_id == label), key=lambda d: -d.score)
        flags = []
        for d in ranked:
            candidates = [(iou(d.box, g.box), i) for i, g in enumerate(gts)
                          if g.image_id == d.image_id and not taken[i]]
            best = max(candidates, default=(0.0, -1))
            hit = best[1] >= 0 and best[0] >= threshold
            if hit:
                taken[best[1]] = True
            flags.append(hit)
        aps.append(_exact_ap(flags, len(gts)))
    return float(sum(aps) / len(aps))


class TestMatching:

    def test_perfect_match(self):
        flags = match_detections([_det(0.9, (0, 0, 10, 10))], [_gt((0, 0, 10, 10))], 0.5)
        assert [tp for _, tp in flags] == [True]

    def test_duplicate_is_false_positive(self):
        dets = [_det(0.8, (0, 0, 10, 10)), _det(0.9, (0, 0, 10, 10))]
        flags = match_detections(dets, [_gt((0, 0, 10, 10))], 0.5)
        assert [(d.score, tp) for d, tp in flags] == [(0.9, True), (0.8, False)]

    def test_hit_miss_hit(self):
        gts = [_gt((0, 0, 10, 10)), _gt((50, 0, 60, 10))]
        dets = [_det(0.9, (0, 0, 10, 10)), _det(0.8, (100, 100, 110, 110)), _det(0.7, (50, 0, 60, 10))]
        assert [tp for _, tp in match_detections(dets, gts, 0.5)] == [True, False, True]

    def test_claims_best_unmatched_ground_truth(self):
        near = _gt((0, 0, 10, 10))
        far = _gt((4, 0, 14, 10))
        first = _det(0.9, (1, 0, 11, 10))
        second = _det(0.8, (1, 0, 11, 10))
        flags = match_detections([first, second], [far, near], 0.3)
        assert [tp for _, tp in flags] == [True, True]
        # the second detection only reaches 'far' because 'near' was claimed first
        assert iou(first.box, near.box) > iou(first.box, far.box)

    def test_class_and_image_must_agree(self):
        gts = [_gt((0, 0, 10, 10), class_id=1, image_id='a')]
        dets = [_det(0.9, (0, 0, 10, 10), class_id=2, image_id='a'),
                _det(0.8, (0, 0, 10, 10), class_id=1, image_id='b')]
        assert [tp for _, tp in match_detections(dets, gts, 0.1)] == [False, False]

    def test_equal_scores_ranked_by_image_then_position(self):
        dets = [_det(0.5, (5, 0, 9, 9), image_id='b'), _det(0.5, (3, 0, 9, 9), image_id='a'),
                _det(0.5, (1, 0, 9, 9), image_id='b')]
        order = [(d.image_id, d.box.x_min) for d, _ in match_detections(dets, [], 0.5)]
        assert order == [('a', 3), ('b', 1), ('b', 5)]


class TestAveragePrecision:

    def test_recall_levels(self):
        assert RECALL_LEVELS[0] == 0.0 and RECALL_LEVELS[-1] == 1.0
        assert len(RECALL_LEVELS) == 11

    def test_tp_fp_tp(self):
        assert average_precision_voc07([True, False, True], 2) == pytest.approx(28 / 33, abs=1e-12)

    def test_perfect_detector(self):
        assert average_precision_voc07([True] * 5, 5) == pytest.approx(1.0)

    def test_no_detections(self):
        assert average_precision_voc07([], 3) == 0.0

    def test_no_ground_truth(self):
        assert average_precision_voc07([False, False], 0) == 0.0

    def test_precision_recall_curve(self):
        precision, recall = precision_recall([True, False, True], 2)
        np.testing.assert_allclose(precision, [1.0, 0.5, 2 / 3])
        np.testing.assert_allclose(recall, [0.5, 0.5, 1.0])

    def test_against_exact_counting(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            n = int(rng.integers(0, 25))
            flags = [bool(f) for f in rng.random(n) < rng.uniform(0.1, 0.9)]
            num_gt = max(1, sum(flags) + int(rng.integers(0, 4)))
            ap = average_precision_voc07(flags, num_gt)
            assert 0.0 <= ap <= 1.0
            assert ap == pytest.approx(float(_exact_ap(flags, num_gt)), abs=1e-9)


class TestMeanAp:

    def test_mean_of_classes(self):
        gts = [_gt((0, 0, 10, 10), 1), _gt((20, 0, 30, 10), 2)]
        dets = [_det(0.9, (0, 0, 10, 10), 1), _det(0.9, (60, 60, 70, 70), 2)]
        report = mean_ap(dets, gts, EvalConfig(iou_threshold=0.5))
        assert report.ap_by_class == {1: pytest.approx(1.0), 2: 0.0}
        assert report.mean_ap == pytest.approx(0.5)
        assert report.per_class[2].false_positives == 1
        assert report.per_class[1].true_positives == 1

    @pytest.mark.parametrize("threshold", [0.1, 0.5, 0.9, 1.0])
    def test_detections_equal_to_annotations(self, threshold):
        rng = np.random.default_rng(1)
        gts = []
        for i in range(12):
            x, y = rng.uniform(0, 200, size=2)
            gts.append(_gt((x, y, x + 20, y + 30), class_id=1 + i % 3, image_id=f"s{i % 4}"))
        dets = [Detection(a.image_id, a.class_id, a.box, 1.0) for a in gts]
        assert mean_ap(dets, gts, EvalConfig(threshold)).mean_ap == pytest.approx(1.0)

    def test_class_without_ground_truth_excluded(self):
        gts = [_gt((0, 0, 10, 10), 1)]
        dets = [_det(0.9, (0, 0, 10, 10), 1), _det(0.9, (0, 0, 10, 10), 2)]
        report = mean_ap(dets, gts, EvalConfig(), labels=[1, 2, 3])
        assert report.excluded_classes == [2, 3]
        assert set(report.per_class) == {1}
        assert report.mean_ap == pytest.approx(1.0)

    def test_nothing_to_evaluate(self):
        with pytest.raises(EvaluationError):
            mean_ap([_det(0.9, (0, 0, 10, 10))], [], EvalConfig())

    def test_mean_is_mean_of_listed(self):
        gts = [_gt((0, 0, 10, 10), 1), _gt((0, 0, 10, 10), 2), _gt((30, 0, 40, 10), 2)]
        dets = [_det(0.9, (0, 0, 10, 10), 2), _det(0.8, (80, 0, 90, 10), 2), _det(0.7, (1, 0, 11, 10), 1)]
        report = mean_ap(dets, gts, EvalConfig())
        assert abs(report.mean_ap - np.mean(list(report.ap_by_class.values()))) < 1e-12

    def test_random_fixtures_match_reference(self):
        rng = np.random.default_rng(7)
        for _ in range(40):
            gts = []
            for _ in range(int(rng.integers(1, 21))):
                x, y = rng.uniform(0, 100, size=2)
                w, h = rng.uniform(5, 30, size=2)
                gts.append(_gt((x, y, x + w, y + h), class_id=int(rng.integers(1, 6)),
                               image_id=f"s{int(rng.integers(0, 3))}"))
            dets = []
            for a in gts:
                if rng.random() < 0.7:
                    dx, dy = rng.uniform(-6, 6, size=2)
                    b = a.box
                    dets.append(_det(float(rng.random()), (b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy),
                                     class_id=a.class_id, image_id=a.image_id))
            for _ in range(int(rng.integers(0, 8))):
                x, y = rng.uniform(0, 100, size=2)
                dets.append(_det(float(rng.random()), (x, y, x + 15, y + 15),
                                 class_id=int(rng.integers(1, 6)), image_id=f"s{int(rng.integers(0, 3))}"))
            report = mean_ap(dets, gts, EvalConfig(0.3))
            assert report.mean_ap == pytest.approx(_reference_map(dets, gts, 0.3), abs=1e-9)

    def test_score_scaling_leaves_ap_unchanged(self):
        gts = [_gt((0, 0, 10, 10)), _gt((20, 0, 30, 10)), _gt((40, 0, 50, 10))]
        dets = [_det(0.9, (0, 0, 10, 10)), _det(0.6, (70, 0, 80, 10)), _det(0.4, (21, 0, 31, 10))]
        scaled = [Detection(d.image_id, d.class_id, d.box, d.score * 0.5) for d in dets]
        cfg = EvalConfig(0.5)
        assert mean_ap(dets, gts, cfg).mean_ap == pytest.approx(mean_ap(scaled, gts, cfg).mean_ap, abs=1e-12)

    def test_extra_low_false_positive_never_helps(self):
        gts = [_gt((0, 0, 10, 10)), _gt((20, 0, 30, 10))]
        dets = [_det(0.9, (0, 0, 10, 10)), _det(0.5, (20, 0, 30, 10))]
        cfg = EvalConfig(0.5)
        base = mean_ap(dets, gts, cfg).mean_ap
        worse = mean_ap(dets + [_det(0.1, (200, 200, 210, 210))], gts, cfg).mean_ap
        assert worse <= base

    def test_invalid_threshold(self):
        with pytest.raises(InvalidInputError):
            EvalConfig(iou_threshold=0.0)
        with pytest.raises(InvalidInputError):
            EvalConfig(iou_threshold=1.5)


class TestReportFiles:

    @pytest.fixture
    def report(self):
        gts = [_gt((0, 0, 10, 10), 1), _gt((20, 0, 30, 10), 2)]
        dets = [_det(0.9, (0, 0, 10, 10), 1), _det(0.7, (20, 0, 30, 10), 2), _det(0.5, (50, 0, 60, 10), 2)]
        return mean_ap(dets, gts, EvalConfig())

    def test_written_files(self, report, tmp_path):
        catalog = ClassCatalog(names=('cola', 'chips'))
        write_report(report, tmp_path, catalog)
        for name in (REPORT_JSON, REPORT_CSV, PR_CURVES_CSV, PR_CURVES_HTML):
            assert (tmp_path / name).exists(), name
        payload = json.loads((tmp_path / REPORT_JSON).read_text())
        assert payload['mAP'] == pytest.approx(report.mean_ap)
        assert [c['class'] for c in payload['classes']] == ['cola', 'chips']
        assert payload['config']['iou_threshold'] == 0.1

    def test_without_plot(self, report, tmp_path):
        write_report(report, tmp_path, plot=False)
        assert (tmp_path / REPORT_CSV).exists()
        assert not (tmp_path / PR_CURVES_HTML).exists()


class TestMaskDiagnostics:

    def test_pixel_accuracy_and_false_positives(self):
        values = np.zeros((3, 2, 2), dtype=np.float32)
        values[0] = [[1.0, 0.0], [0.0, 1.0]]
        values[1] = [[0.0, 1.0], [0.0, 0.0]]
        values[2] = [[0.0, 0.0], [1.0, 0.0]]
        mask = ScoreMask(values, has_background=True)
        gt = np.array([[0, 1], [1, 0]])
        assert mask_pixel_accuracy(mask, gt) == pytest.approx(0.75)
        assert false_positive_pixels(mask, gt) == 1

    def test_shape_mismatch(self):
        mask = ScoreMask(np.full((2, 3, 3), 0.5, dtype=np.float32))
        with pytest.raises(InvalidInputError):
            mask_pixel_accuracy(mask, np.zeros((2, 2), dtype=int))

    def test_compare_raw_and_refined(self):
        gt = np.array([[0, 1], [1, 0]])
        raw = np.zeros((3, 2, 2), dtype=np.float32)
        raw[2] = 1.0
        refined = np.zeros((3, 2, 2), dtype=np.float32)
        refined[0] = [[1.0, 0.0], [0.0, 1.0]]
        refined[1] = [[0.0, 1.0], [1.0, 0.0]]
        row = compare_masks(ScoreMask(raw, has_background=True), ScoreMask(refined, has_background=True), gt)
        assert row == {'raw_pixel_accuracy': 0.0, 'refined_pixel_accuracy': 1.0,
                       'raw_false_positives': 4, 'refined_false_positives': 0}

    def test_diagnostics_files(self, tmp_path):
        rows = [
            {'image_id': 'a', 'raw_pixel_accuracy': 0.5, 'refined_pixel_accuracy': 0.75,
             'raw_false_positives': 6, 'refined_false_positives': 2},
            {'image_id': 'b', 'raw_pixel_accuracy': 0.7, 'refined_pixel_accuracy': 0.85,
             'raw_false_positives': 4, 'refined_false_positives': 1},
        ]
        summary = write_mask_diagnostics(rows, tmp_path)
        assert summary['raw_pixel_accuracy'] == pytest.approx(0.6)
        assert summary['refined_pixel_accuracy'] == pytest.approx(0.8)
        assert (summary['raw_false_positives'], summary['refined_false_positives']) == (10, 3)
        assert json.loads((tmp_path / MASK_DIAGNOSTICS_JSON).read_text()) == summary
        assert (tmp_path / MASK_DIAGNOSTICS_CSV).read_text().splitlines()[0].startswith('image_id,')

    def test_no_rows(self, tmp_path):
        with pytest.raises(EvaluationError):
            write_mask_diagnostics([], tmp_path)
