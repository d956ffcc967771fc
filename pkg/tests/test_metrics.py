"""Tests for IoU reporting, label extraction, and forgetting."""

import numpy as np
import pytest

from teddy.core import ClassSpace, ScoreMap, Semantics
from teddy.data import DatasetConfig, gen_shapes
from teddy.metrics import (
    MetricsReport,
    evaluate_model,
    forgetting,
    iou_counts,
    miou,
    predict_labelmap,
    report_from_counts,
)
from teddy.trainer import ToyModel

SPACE = ClassSpace((1, 2), (3,))


def labels(rows):
    return np.asarray(rows, dtype=np.int64)


class TestPredictLabelmap:
    def test_dominant_channel_constant_map(self):
        data = np.zeros((4, 2, 2))
        data[2] = 5.0
        out = predict_labelmap(ScoreMap(data, Semantics.LOGITS), SPACE)
        assert np.array_equal(out, np.full((2, 2), 2))

    def test_all_equal_ties_to_background(self):
        out = predict_labelmap(ScoreMap(np.ones((4, 2, 2)), Semantics.LOGITS), SPACE)
        assert np.array_equal(out, np.zeros((2, 2)))

    def test_hand_instance(self):
        data = np.zeros((4, 2, 2))
        data[1, 0, 0] = 1.0  # class 1
        data[3, 0, 1] = 2.0  # class 3
        data[2, 1, 0] = 0.5  # class 2
        out = predict_labelmap(ScoreMap(data, Semantics.LOGITS), SPACE)
        assert out.tolist() == [[1, 3], [2, 0]]

    def test_ids_come_from_class_space(self):
        space = ClassSpace((7,), (9,))
        data = np.zeros((3, 1, 2))
        data[1, 0, 0] = 1.0
        data[2, 0, 1] = 1.0
        out = predict_labelmap(ScoreMap(data, Semantics.LOGITS), space)
        assert out.tolist() == [[7, 9]]

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="class space"):
            predict_labelmap(ScoreMap(np.zeros((3, 1, 1)), Semantics.LOGITS), SPACE)


class TestMiou:
    def test_perfect_prediction(self):
        gt = labels([[0, 1], [2, 3]])
        report = miou(gt, gt, SPACE)
        assert report.per_class == {0: 1.0, 1: 1.0, 2: 1.0, 3: 1.0}
        assert report.old_mean == 1.0
        assert report.new_mean == 1.0
        assert report.all_mean == 1.0

    def test_disjoint_prediction_scores_zero(self):
        pred = labels([[1, 1], [0, 0]])
        gt = labels([[0, 0], [1, 1]])
        report = miou(pred, gt, ClassSpace((1,), ()))
        assert report.per_class[1] == 0.0
        assert report.per_class[0] == 0.0

    def test_overlapping_squares_one_third(self):
        # Two 2x2 squares overlapping on a 1x2 strip: 2 / (4 + 4 - 2).
        pred = np.zeros((4, 4), dtype=np.int64)
        pred[0:2, 0:2] = 1
        gt = np.zeros((4, 4), dtype=np.int64)
        gt[1:3, 0:2] = 1
        report = miou(pred, gt, ClassSpace((1,), ()))
        assert abs(report.per_class[1] - 1.0 / 3.0) < 1e-15
        assert report.old_mean == report.per_class[1]  # singleton group

    def test_absent_from_both_excluded(self):
        pred = labels([[0, 1]])
        gt = labels([[0, 1]])
        report = miou(pred, gt, SPACE)
        assert 2 not in report.per_class
        assert 3 not in report.per_class
        assert report.new_mean is None  # class 3 never appears
        assert report.old_mean == 1.0  # only class 1 counts

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(60)
        pred = rng.integers(0, 4, (6, 6))
        gt = rng.integers(0, 4, (6, 6))
        base = miou(pred, gt, SPACE)
        remap = {0: 0, 1: 5, 2: 9, 3: 7}
        lut = np.zeros(10, dtype=np.int64)
        for k, v in remap.items():
            lut[k] = v
        renamed_space = ClassSpace((5, 9), (7,))
        renamed = miou(lut[pred], lut[gt], renamed_space)
        for old_id, new_id in ((1, 5), (2, 9), (3, 7)):
            assert base.per_class[old_id] == renamed.per_class[new_id]
        assert base.old_mean == renamed.old_mean
        assert base.all_mean == renamed.all_mean

    def test_values_in_unit_interval_fuzz(self):
        rng = np.random.default_rng(61)
        for _ in range(20):
            pred = rng.integers(0, 4, (5, 5))
            gt = rng.integers(0, 4, (5, 5))
            report = miou(pred, gt, SPACE)
            for v in report.per_class.values():
                assert 0.0 <= v <= 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            miou(np.zeros((2, 2), dtype=np.int64), np.zeros((2, 3), dtype=np.int64), SPACE)

    def test_to_json_layout(self):
        report = miou(labels([[0, 1]]), labels([[0, 1]]), SPACE)
        blob = report.to_json()
        assert blob["per_class"] == {"0": 1.0, "1": 1.0}
        assert blob["old_mean"] == 1.0
        assert blob["new_mean"] is None


class TestCounts:
    def test_counts_accumulate_to_corpus_iou(self):
        pred_a, gt_a = labels([[1, 0]]), labels([[1, 1]])
        pred_b, gt_b = labels([[1, 1]]), labels([[1, 0]])
        ids = (0,) + SPACE.all_classes
        ia, ua = iou_counts(pred_a, gt_a, ids)
        ib, ub = iou_counts(pred_b, gt_b, ids)
        report = report_from_counts(ia + ib, ua + ub, SPACE)
        # class 1: intersections 1 + 1, unions 2 + 2.
        assert report.per_class[1] == 0.5

    def test_zero_union_classes_dropped(self):
        inter = np.array([0, 0, 0, 0])
        union = np.array([4, 0, 0, 0])
        report = report_from_counts(inter, union, SPACE)
        assert report.per_class == {0: 0.0}
        assert report.all_mean == 0.0
        assert report.old_mean is None


class TestEvaluateModel:
    def test_untrained_model_predicts_background(self):
        samples = gen_shapes(DatasetConfig(height=16, width=16, seed=4), 3)
        space = ClassSpace((), (1, 2, 3, 4, 5, 6))
        model = ToyModel.create(space)
        report = evaluate_model(model, samples)
        # All-zero logits tie to background everywhere.
        assert report.per_class[0] < 1.0
        for c in space.new_classes:
            if c in report.per_class:
                assert report.per_class[c] == 0.0

    def test_explicit_space_override(self):
        samples = gen_shapes(DatasetConfig(height=16, width=16, seed=4), 2)
        space = ClassSpace((), (1, 2, 3, 4, 5, 6))
        model = ToyModel.create(space)
        eval_space = ClassSpace((1, 2, 3, 4), (5, 6))
        report = evaluate_model(model, samples, space=eval_space)
        present = {c for s in samples for c in np.unique(s.gt) if c}
        assert set(report.per_class) == {0} | present


class TestForgetting:
    def rep(self, values):
        return MetricsReport(per_class=values, old_mean=None, new_mean=None, all_mean=None)

    def test_constant_history_no_drop(self):
        hist = [self.rep({1: 0.8}), self.rep({1: 0.8})]
        assert forgetting(hist, (1,)) == {1: 0.0}

    def test_drop_measured_from_best(self):
        hist = [self.rep({1: 0.8}), self.rep({1: 0.6}), self.rep({1: 0.5})]
        out = forgetting(hist, (1,))
        assert abs(out[1] - 0.3) < 1e-15

    def test_monotone_improvement_scores_nonpositive(self):
        hist = [self.rep({1: 0.4}), self.rep({1: 0.6}), self.rep({1: 0.9})]
        assert forgetting(hist, (1,))[1] <= 0.0

    def test_class_missing_from_final_skipped(self):
        hist = [self.rep({1: 0.8, 2: 0.5}), self.rep({1: 0.7})]
        out = forgetting(hist, (1, 2))
        assert 2 not in out
        assert abs(out[1] - 0.1) < 1e-15

    def test_needs_two_reports(self):
        with pytest.raises(ValueError, match="two"):
            forgetting([self.rep({1: 0.5})], (1,))
