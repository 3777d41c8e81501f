"""Track scoring: threshold accuracy, Jaccard, occlusion, 3D alignment."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chain4d.errors import ValidationError
from chain4d.trackeval import (
    THRESHOLDS_2D,
    THRESHOLDS_3D,
    accuracy_per_threshold,
    apd3d,
    apd3d_per_threshold,
    average_jaccard,
    delta_3px,
    format_report_2d,
    format_report_3d,
    jaccard_per_threshold,
    median_offset,
    occlusion_accuracy,
    position_accuracy,
    predict_visibility,
    score_tracks_2d,
    seg_accuracy,
)


def all_visible(q, f):
    return np.ones((q, f), dtype=bool)


class TestPerfectPredictions:
    def test_all_2d_metrics_hit_100(self):
        rng = np.random.default_rng(3)
        gt = rng.uniform(0, 512, size=(4, 6, 2))
        vis = all_visible(4, 6)
        assert position_accuracy(gt, gt, vis) == pytest.approx(100.0)
        assert average_jaccard(gt, vis, gt, vis) == pytest.approx(100.0)
        assert occlusion_accuracy(vis, vis) == pytest.approx(100.0)
        assert delta_3px(gt, gt, vis) == pytest.approx(100.0)

    def test_apd3d_hits_100(self):
        rng = np.random.default_rng(5)
        gt = rng.normal(size=(3, 7, 3))
        assert apd3d(gt, gt) == pytest.approx(100.0)


class TestHandWorkedCase:
    """Two points, two frames, everything visible, a single 3 px error
    (between the 2 px and 4 px rungs, so no boundary semantics matter)."""

    def setup_method(self):
        self.gt = np.array([
            [[10.0, 10.0], [20.0, 10.0]],
            [[40.0, 40.0], [50.0, 40.0]],
        ])
        self.pred = self.gt.copy()
        self.pred[1, 1, 0] += 3.0
        self.vis = all_visible(2, 2)

    def test_position_accuracy_is_90(self):
        # within-1px 3/4, within-2 3/4, then 4/4 at 4, 8, 16
        acc = accuracy_per_threshold(self.pred, self.gt, self.vis)
        assert acc[1.0] == pytest.approx(75.0)
        assert acc[2.0] == pytest.approx(75.0)
        assert acc[4.0] == pytest.approx(100.0)
        assert position_accuracy(self.pred, self.gt, self.vis) == \
            pytest.approx(90.0)

    def test_average_jaccard_is_84(self):
        # t in {1,2}: TP=3, FP=1 (visible but off target) -> 3/5
        # t in {4,8,16}: TP=4, FP=0 -> 4/4
        jac = jaccard_per_threshold(self.pred, self.vis, self.gt, self.vis)
        assert jac[1.0] == pytest.approx(60.0)
        assert jac[16.0] == pytest.approx(100.0)
        assert average_jaccard(self.pred, self.vis, self.gt, self.vis) == \
            pytest.approx(84.0)

    def test_occlusion_accuracy_all_match(self):
        assert occlusion_accuracy(self.vis, self.vis) == pytest.approx(100.0)

    def test_bundle_report_lists_every_threshold(self):
        score = score_tracks_2d(self.pred, self.vis, self.gt, self.vis)
        assert score.average_jaccard == pytest.approx(84.0)
        assert score.position_accuracy == pytest.approx(90.0)
        text = format_report_2d(score)
        for t in THRESHOLDS_2D:
            assert f"threshold {t:g}px" in text
        assert "AJ 84.00" in text


class TestJaccardChargesOcclusionMistakes:
    def test_visible_prediction_on_occluded_point_is_false_positive(self):
        gt = np.zeros((1, 2, 2))
        pred = gt.copy()
        gt_vis = np.array([[True, False]])
        pred_vis = np.array([[True, True]])
        # every threshold: TP=1, gt positives=1, FP=1 -> 50
        jac = jaccard_per_threshold(pred, pred_vis, gt, gt_vis)
        assert all(v == pytest.approx(50.0) for v in jac.values())

    def test_occluded_prediction_on_visible_point_is_missed(self):
        gt = np.zeros((1, 2, 2))
        pred = gt.copy()
        gt_vis = np.array([[True, True]])
        pred_vis = np.array([[True, False]])
        # TP=1 of 2 gt positives, FP=0 -> 50
        jac = jaccard_per_threshold(pred, pred_vis, gt, gt_vis)
        assert all(v == pytest.approx(50.0) for v in jac.values())

    def test_occlusion_accuracy_counts_mismatches(self):
        pred_vis = np.array([[True, True], [True, False]])
        gt_vis = np.array([[True, True], [True, True]])
        assert occlusion_accuracy(pred_vis, gt_vis) == pytest.approx(75.0)


class TestJointMetrics:
    def test_seg_accuracy_uses_per_frame_radius(self):
        gt = np.zeros((1, 2, 2))
        pred = gt.copy()
        pred[0, :, 0] = 3.0                    # 3 px error in both frames
        areas = np.array([100.0, 400.0])       # radii 2 px and 4 px
        score = seg_accuracy(pred, gt, all_visible(1, 2), areas)
        assert score == pytest.approx(50.0)

    def test_delta_3px_clear_hits_and_misses(self):
        gt = np.zeros((1, 2, 2))
        pred = gt.copy()
        pred[0, 0, 0] = 2.0
        pred[0, 1, 0] = 5.0
        assert delta_3px(pred, gt, all_visible(1, 2)) == pytest.approx(50.0)

    def test_area_shape_checked(self):
        gt = np.zeros((1, 2, 2))
        with pytest.raises(ValidationError, match="areas"):
            seg_accuracy(gt, gt, all_visible(1, 2), np.ones(3))


class TestApd3d:
    def test_constant_offset_costs_nothing(self):
        rng = np.random.default_rng(7)
        gt = rng.normal(size=(4, 5, 3))
        pred = gt + np.array([0.3, -0.2, 0.5])
        assert apd3d(pred, gt) == pytest.approx(100.0)
        assert np.allclose(median_offset(pred, gt), [0.3, -0.2, 0.5],
                           atol=1e-12)

    def test_translation_invariance_exact(self):
        rng = np.random.default_rng(11)
        gt = rng.normal(size=(3, 6, 3))
        pred = gt + rng.normal(scale=0.1, size=gt.shape)
        base = apd3d_per_threshold(pred, gt)
        shifted = apd3d_per_threshold(pred + np.array([5.0, -2.0, 9.0]), gt)
        assert base == shifted

    def test_hand_worked_single_outlier(self):
        rng = np.random.default_rng(13)
        gt = rng.normal(size=(5, 1, 3))
        pred = gt.copy()
        pred[0, 0, 0] += 0.12                  # between the 0.1 and 0.2 rungs
        acc = apd3d_per_threshold(pred, gt)
        assert acc[0.05] == pytest.approx(80.0)
        assert acc[0.1] == pytest.approx(80.0)
        assert acc[0.2] == pytest.approx(100.0)
        assert apd3d(pred, gt) == pytest.approx(92.0)

    def test_scene_scale_multiplies_thresholds(self):
        rng = np.random.default_rng(17)
        gt = rng.normal(size=(5, 1, 3))
        pred = gt.copy()
        pred[0, 0, 0] += 0.12
        scaled = apd3d_per_threshold(pred, gt, scale=10.0)
        # 0.12 offset sits under every scaled rung (0.5 ... 8)
        assert all(v == pytest.approx(100.0) for v in scaled.values())

    def test_visibility_mask_restricts_scoring(self):
        gt = np.zeros((2, 2, 3))
        pred = gt.copy()
        pred[0, 0, 0] = 50.0                   # huge error, but occluded
        vis = np.array([[False, True], [True, True]])
        assert apd3d(pred, gt, vis) == pytest.approx(100.0)

    def test_report_text(self):
        rng = np.random.default_rng(19)
        gt = rng.normal(size=(2, 3, 3))
        text = format_report_3d(apd3d_per_threshold(gt, gt))
        assert "APD3D 100.00" in text
        for t in THRESHOLDS_3D:
            assert f"threshold {t:g}" in text

    @settings(deadline=None, max_examples=25)
    @given(st.integers(0, 10_000),
           st.floats(-100.0, 100.0), st.floats(-100.0, 100.0),
           st.floats(-100.0, 100.0))
    def test_translation_invariance_property(self, seed, dx, dy, dz):
        rng = np.random.default_rng(seed)
        gt = rng.normal(size=(3, 4, 3))
        pred = gt + rng.normal(scale=0.2, size=gt.shape)
        offset = np.array([dx, dy, dz])
        assert apd3d_per_threshold(pred + offset, gt) == \
            apd3d_per_threshold(pred, gt)


class TestPredictVisibility:
    def test_tenth_percentile_floor(self):
        ref = np.linspace(0.0, 1.0, 11)        # 10th percentile = 0.1
        conf = np.array([0.05, 0.1, 0.5])
        vis = predict_visibility(conf, ref)
        assert vis.tolist() == [False, True, True]

    def test_shapes_preserved(self):
        ref = np.full(20, 0.8)
        conf = np.full((3, 4), 0.9)
        assert predict_visibility(conf, ref).shape == (3, 4)

    def test_empty_reference_rejected(self):
        with pytest.raises(ValidationError, match="self-confidences"):
            predict_visibility(np.ones(3), np.empty(0))


class TestValidation:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError, match="disagree"):
            position_accuracy(np.zeros((2, 3, 2)), np.zeros((2, 4, 2)),
                              all_visible(2, 3))

    def test_wrong_rank_rejected(self):
        with pytest.raises(ValidationError, match="queries x frames"):
            position_accuracy(np.zeros((2, 3)), np.zeros((2, 3)),
                              all_visible(2, 3))

    def test_visibility_shape_rejected(self):
        with pytest.raises(ValidationError, match="visibility"):
            position_accuracy(np.zeros((2, 3, 2)), np.zeros((2, 3, 2)),
                              np.ones((2, 2), dtype=bool))

    def test_nothing_visible_rejected(self):
        with pytest.raises(ValidationError, match="no visible"):
            position_accuracy(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)),
                              np.zeros((1, 2), dtype=bool))
