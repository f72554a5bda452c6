import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dermscreen.data import Roi
from dermscreen.errors import MetricUndefinedError
from dermscreen.metrics import (
    MAP_SWEEP_THRESHOLDS,
    auc,
    average_precision,
    iou,
    iou_summary,
    map_at,
    match_detections,
    recall_any_overlap,
)

from .conftest import random_box
from .oracles import corner_iou, greedy_match, mann_whitney_auc, trapezoid_ap


def box(x, y, w, h):
    return Roi(x_center=x, y_center=y, width=w, height=h)


class TestAuc:
    def test_perfect_ranking(self):
        assert auc([(0.9, 1), (0.1, 0)]) == 1.0

    def test_half_ranked(self):
        assert auc([(0.9, 1), (0.8, 0), (0.3, 1)]) == pytest.approx(0.5, abs=1e-12)

    def test_single_class_undefined(self):
        with pytest.raises(MetricUndefinedError):
            auc([(0.5, 1), (0.7, 1)])

    def test_matches_mann_whitney_with_ties(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 51))
            scores = np.round(rng.uniform(0, 1, size=n), 1)  # coarse grid forces ties
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            pairs = list(zip(scores.tolist(), labels.tolist()))
            assert auc(pairs) == pytest.approx(mann_whitney_auc(pairs), abs=1e-9)

    @given(
        st.lists(
            # coarse score grid keeps the warp injective in float arithmetic
            st.tuples(st.integers(0, 1000).map(lambda k: k / 1000.0), st.integers(0, 1)),
            min_size=4,
            max_size=30,
        )
    )
    def test_invariant_under_monotone_transform(self, pairs):
        labels = [y for _, y in pairs]
        if len(set(labels)) < 2:
            pairs = pairs[:-2] + [(0.5, 0), (0.5, 1)]
        warped = [(3.0 * s**3 + 2.0 * s + 1.0, y) for s, y in pairs]
        assert auc(warped) == pytest.approx(auc(pairs), abs=1e-12)

    def test_symmetry_under_label_flip_and_negation(self, rng):
        for _ in range(50):
            scores = np.round(rng.uniform(0, 1, size=20), 1)
            labels = rng.integers(0, 2, size=20)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            pairs = list(zip(scores.tolist(), labels.tolist()))
            mirrored = [(-s, 1 - y) for s, y in pairs]
            assert auc(mirrored) == pytest.approx(auc(pairs), abs=1e-12)


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision([(0.9, 1), (0.8, 1), (0.1, 0)]) == pytest.approx(1.0, abs=1e-12)

    def test_worked_example(self):
        # oracle value: 19/24 (see trapezoid_ap on the same input)
        pairs = [(0.9, 1), (0.8, 0), (0.3, 1)]
        assert average_precision(pairs) == pytest.approx(19.0 / 24.0, abs=1e-12)
        assert trapezoid_ap(pairs) == pytest.approx(19.0 / 24.0, abs=1e-12)

    def test_all_positive(self):
        assert average_precision([(0.2, 1), (0.9, 1)]) == pytest.approx(1.0, abs=1e-12)

    def test_no_positives_undefined(self):
        with pytest.raises(MetricUndefinedError):
            average_precision([(0.4, 0)])

    def test_matches_sweep_oracle(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 40))
            scores = np.round(rng.uniform(0, 1, size=n), 1)
            labels = rng.integers(0, 2, size=n)
            if labels.sum() == 0:
                labels[0] = 1
            pairs = list(zip(scores.tolist(), labels.tolist()))
            assert average_precision(pairs) == pytest.approx(trapezoid_ap(pairs), abs=1e-9)

    def test_positives_above_negatives_is_one(self, rng):
        for _ in range(20):
            n_pos, n_neg = int(rng.integers(1, 10)), int(rng.integers(1, 10))
            pairs = [(float(2 + rng.uniform()), 1) for _ in range(n_pos)]
            pairs += [(float(rng.uniform()), 0) for _ in range(n_neg)]
            assert average_precision(pairs) == pytest.approx(1.0, abs=1e-12)


class TestIou:
    def test_identical(self):
        b = box(10, 10, 4, 6)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(box(0, 0, 2, 2), box(10, 10, 2, 2)) == 0.0

    def test_hand_case_one_third(self):
        # overlap 1x2=2, union 4+4-2=6
        assert iou(box(1, 1, 2, 2), box(2, 1, 2, 2)) == pytest.approx(1.0 / 3.0, abs=1e-12)

    @given(st.data())
    @settings(max_examples=200)
    def test_symmetric_and_self_unit(self, data):
        f = st.floats(-50, 50, allow_nan=False)
        g = st.floats(0.5, 40, allow_nan=False)
        a = Roi(data.draw(f), data.draw(f), data.draw(g), data.draw(g))
        b = Roi(data.draw(f), data.draw(f), data.draw(g), data.draw(g))
        assert iou(a, b) == iou(b, a)
        assert iou(a, a) == pytest.approx(1.0, abs=1e-12)
        assert 0.0 <= iou(a, b) <= 1.0

    def test_matches_corner_oracle(self, rng):
        for _ in range(500):
            a, b = random_box(rng), random_box(rng)
            assert iou(a, b) == pytest.approx(corner_iou(a, b), abs=1e-12)


class TestMatchDetections:
    def test_one_gt_two_overlapping_predictions(self):
        gt = [box(10, 10, 8, 8)]
        preds = [(box(10, 10, 8, 8), 0.9), (box(11, 10, 8, 8), 0.8)]
        result = match_detections(preds, gt, 0.5)
        assert result.pred_is_tp == (True, False)
        assert result.gt_matched == (True,)

    def test_zero_predictions(self):
        result = match_detections([], [box(1, 1, 2, 2)], 0.5)
        assert result.tp_count == 0 and result.fp_count == 0
        assert result.gt_matched == (False,)

    def test_matches_greedy_oracle(self, rng):
        for _ in range(1000):
            n_pred = int(rng.integers(0, 5))
            n_gt = int(rng.integers(0, 5))
            preds = [(random_box(rng, 40, 20), float(rng.uniform())) for _ in range(n_pred)]
            gts = [random_box(rng, 40, 20) for _ in range(n_gt)]
            threshold = float(rng.uniform(0.05, 0.95))
            result = match_detections(preds, gts, threshold)
            oracle_tp, oracle_gt = greedy_match(preds, gts, threshold)
            assert list(result.pred_is_tp) == oracle_tp
            assert list(result.gt_matched) == oracle_gt

    def test_tp_count_monotone_in_threshold(self, rng):
        for _ in range(200):
            preds = [(random_box(rng, 30, 15), float(rng.uniform())) for _ in range(4)]
            gts = [random_box(rng, 30, 15) for _ in range(3)]
            counts = [match_detections(preds, gts, t).tp_count for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
            assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_iou_tie_broken_by_gt_order(self):
        gt = [box(10, 10, 4, 4), box(20, 10, 4, 4)]
        pred_box = box(15, 10, 14, 4)  # equal IoU with both
        result = match_detections([(pred_box, 0.9)], gt, 0.1)
        assert result.gt_matched == (True, False)


class TestMapAt:
    def test_perfect_detections(self):
        gts = {"a": [box(10, 10, 6, 6)], "b": [box(5, 5, 4, 4), box(20, 20, 6, 6)]}
        preds = {k: [(g, 0.9 - 0.1 * i) for i, g in enumerate(v)] for k, v in gts.items()}
        result = map_at(preds, gts, thresholds=(0.5, 0.75))
        assert result.per_threshold[0.5] == pytest.approx(1.0, abs=1e-12)
        assert result.per_threshold[0.75] == pytest.approx(1.0, abs=1e-12)
        assert result.mean_50_95 == pytest.approx(1.0, abs=1e-12)

    def test_all_misses_zero_at_half(self):
        gts = {"a": [box(10, 10, 4, 4)]}
        preds = {"a": [(box(30, 30, 4, 4), 0.9)]}
        assert map_at(preds, gts).per_threshold[0.5] == 0.0

    def test_sweep_mean_is_ten_term_average(self):
        gts = {"a": [box(10, 10, 10, 10)]}
        preds = {"a": [(box(11, 10, 10, 10), 0.8)]}  # IoU = 9/11 ~ 0.818
        result = map_at(preds, gts)
        explicit = np.mean([map_at(preds, gts, thresholds=(t,)).per_threshold[t] for t in MAP_SWEEP_THRESHOLDS])
        assert result.mean_50_95 == pytest.approx(float(explicit), abs=1e-12)
        assert len(MAP_SWEEP_THRESHOLDS) == 10

    def test_no_ground_truth_undefined(self):
        with pytest.raises(MetricUndefinedError):
            map_at({"a": []}, {"a": []})


class TestRecallAnyOverlap:
    def test_half_overlapped(self):
        gts = {"a": [box(10, 10, 4, 4), box(30, 30, 4, 4)]}
        preds = {"a": [(box(11, 10, 4, 4), 0.9)]}
        assert recall_any_overlap(preds, gts) == 0.5

    def test_empty_predictions(self):
        assert recall_any_overlap({}, {"a": [box(1, 1, 2, 2)]}) == 0.0

    def test_all_touched(self):
        gts = {"a": [box(10, 10, 4, 4)], "b": [box(5, 5, 2, 2)]}
        preds = {"a": [(box(9, 9, 4, 4), 0.2)], "b": [(box(5, 5, 8, 8), 0.1)]}
        assert recall_any_overlap(preds, gts) == 1.0

    def test_no_ground_truth_undefined(self):
        with pytest.raises(MetricUndefinedError):
            recall_any_overlap({"a": [(box(1, 1, 2, 2), 0.5)]}, {"a": []})


class TestIouSummary:
    def test_linear_interpolation_quartiles(self):
        gts = [box(10, 10, 10, 10)]
        results = []
        for target in (0.5, 0.7, 0.9):
            # build a prediction with the desired IoU against a fixed gt
            shift = 10.0 * (1.0 - target) / (1.0 + target)
            pred = box(10 + shift, 10, 10, 10)
            results.append(match_detections([(pred, 0.9)], gts, 0.0))
        summary = iou_summary(results)
        assert summary.median == pytest.approx(0.7, abs=1e-9)
        assert summary.q1 == pytest.approx(0.6, abs=1e-9)
        assert summary.q3 == pytest.approx(0.8, abs=1e-9)

    def test_single_match_degenerate(self):
        gts = [box(10, 10, 4, 4)]
        result = match_detections([(box(10, 10, 4, 4), 0.9)], gts, 0.5)
        summary = iou_summary([result])
        assert summary.median == summary.q1 == summary.q3 == 1.0
        assert summary.count == 1

    def test_identical_values_zero_width(self):
        gts = [box(10, 10, 4, 4)]
        result = match_detections([(box(10, 10, 4, 4), 0.9)], gts, 0.5)
        summary = iou_summary([result, result, result])
        assert summary.q3 - summary.q1 == 0.0

    def test_no_matches_undefined(self):
        result = match_detections([(box(40, 40, 2, 2), 0.9)], [box(1, 1, 2, 2)], 0.5)
        with pytest.raises(MetricUndefinedError):
            iou_summary([result])
