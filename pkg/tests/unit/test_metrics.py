"""
Test cases for segmentation metrics and feature diagnostics
"""
import math

import numpy as np
import pytest

from contextrast.anchors import compute_anchors
from contextrast.bane_sampling import DistanceMap
from contextrast.exceptions import ArgumentError, FormatError, UndefinedMetricError
from contextrast.feature_store import IGNORE, EmbeddingSet, LabelMap
from contextrast.metrics import (PROFILE_COLUMNS, ConfusionMatrix, InstanceMap, ProfileRow, alignment,
                                 average_instance_sizes, boundary_mask, boundary_miou, boundary_vs_interior,
                                 class_centroids, confusion_from_maps, cos_vs_distance_profile,
                                 feature_diagnostics, iiou, miou, neighborhood_uniformity, uniformity,
                                 write_profile_csv)
from tests.helpers import brute_force_confusion


class TestMIoU:
    """Test confusion matrices and mean IoU"""

    def test_perfect_prediction(self):
        gt = LabelMap(np.random.default_rng(0).integers(0, 3, size=(5, 5)))
        score, _ = miou(confusion_from_maps([gt], [gt], 3))
        assert score == pytest.approx(100.0)

    def test_constant_prediction(self):
        """Predicting class 0 on a half 0 / half 1 map should give IoU (50, 0) and mIoU 25"""
        gt = np.zeros((4, 4), dtype=np.uint8)
        gt[:, 2:] = 1
        score, per_class = miou(confusion_from_maps([LabelMap(np.zeros((4, 4)))], [LabelMap(gt)], 2))
        np.testing.assert_allclose(per_class, [50.0, 0.0])
        assert score == pytest.approx(25.0)

    def test_matches_brute_force(self):
        """Random 8x8 maps over 3 classes should match a per-pixel count"""
        rng = np.random.default_rng(1)
        gt = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
        gt[0, :3] = IGNORE
        pred = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
        cm = ConfusionMatrix(3).update(LabelMap(pred), LabelMap(gt))
        np.testing.assert_array_equal(cm.counts, brute_force_confusion(pred, gt, 3))

    def test_swapping_prediction_and_truth(self):
        """Without IGNORE pixels mIoU should not depend on which map is the truth"""
        rng = np.random.default_rng(6)
        for _ in range(20):
            a = LabelMap(rng.integers(0, 4, size=(6, 7)))
            b = LabelMap(rng.integers(0, 4, size=(6, 7)))
            forward, _ = miou(confusion_from_maps([a], [b], 4))
            swapped, _ = miou(confusion_from_maps([b], [a], 4))
            assert forward == pytest.approx(swapped, abs=1e-12)

    def test_absent_class_skipped(self):
        """A class absent from GT and prediction should not count"""
        gt = LabelMap(np.zeros((2, 2)))
        score, per_class = miou(confusion_from_maps([gt], [gt], 3))
        assert score == pytest.approx(100.0)
        assert math.isnan(per_class[1])

    def test_all_classes_empty(self):
        with pytest.raises(UndefinedMetricError):
            miou(ConfusionMatrix(3))

    def test_matrices_add(self):
        a = ConfusionMatrix(2).update(np.array([[0, 1]]), np.array([[0, 0]]))
        b = ConfusionMatrix(2).update(np.array([[1]]), np.array([[1]]))
        assert (a + b).counts.tolist() == [[1, 1], [0, 1]]
        assert (a + b).pixel_accuracy() == pytest.approx(200.0 / 3)


class TestIIoU:
    """Test instance-weighted IoU"""

    def test_equal_sizes_reduce_to_iou(self):
        """Equal-sized instances should give weight 1 and the plain IoU"""
        gt = np.zeros((4, 4), dtype=np.uint8)
        gt[0, 0:2] = 1
        gt[3, 2:4] = 1
        inst = np.zeros((4, 4), dtype=np.int32)
        inst[0, 0:2] = 1
        inst[3, 2:4] = 2
        pred = gt.copy()
        pred[0, 0] = 0
        pred[1, 1] = 1
        maps = InstanceMap(inst)
        sizes = average_instance_sizes([LabelMap(gt)], [maps], 2)
        _, per_class = miou(confusion_from_maps([LabelMap(pred)], [LabelMap(gt)], 2))
        score = iiou(LabelMap(pred), LabelMap(gt), maps, sizes, 2)
        assert score == pytest.approx(per_class[1])

    def test_small_missed_instance_is_upweighted(self):
        """Missing a small instance entirely should cost more than in plain IoU"""
        gt = np.zeros((8, 8), dtype=np.uint8)
        inst = np.zeros((8, 8), dtype=np.int32)
        gt[0:4, 0:4] = 1
        inst[0:4, 0:4] = 1
        gt[7, 7] = 1
        inst[7, 7] = 2
        pred = gt.copy()
        pred[7, 7] = 0
        maps = InstanceMap(inst)
        sizes = average_instance_sizes([LabelMap(gt)], [maps], 2)
        _, per_class = miou(confusion_from_maps([LabelMap(pred)], [LabelMap(gt)], 2))
        assert iiou(LabelMap(pred), LabelMap(gt), maps, sizes, 2) < per_class[1]

    def test_hand_computed_weights(self):
        """Two instances of sizes 4 and 1 (average 2.5) with one pixel of each missed"""
        gt = np.zeros((4, 4), dtype=np.uint8)
        inst = np.zeros((4, 4), dtype=np.int32)
        gt[0, 0:4] = 1
        inst[0, 0:4] = 1
        gt[3, 3] = 1
        inst[3, 3] = 2
        pred = gt.copy()
        pred[0, 0] = 0
        pred[3, 3] = 0
        pred[2, 0] = 1
        maps = InstanceMap(inst)
        sizes = average_instance_sizes([LabelMap(gt)], [maps], 2)
        assert sizes[1] == pytest.approx(2.5)
        # instance 1: weight 2.5/4, 3 hit 1 missed; instance 2: weight 2.5, missed
        itp = 0.625 * 3
        ifn = 0.625 * 1 + 2.5 * 1
        fp = 1
        score = iiou(LabelMap(pred), LabelMap(gt), maps, sizes, 2)
        assert score == pytest.approx(100.0 * itp / (itp + fp + ifn))

    def test_instance_spanning_classes(self):
        gt = np.array([[0, 1]], dtype=np.uint8)
        inst = InstanceMap(np.array([[1, 1]]))
        with pytest.raises(FormatError):
            inst.instances(LabelMap(gt))

    def test_no_instances(self):
        gt = LabelMap(np.zeros((2, 2)))
        inst = InstanceMap(np.zeros((2, 2), dtype=np.int32))
        with pytest.raises(UndefinedMetricError):
            iiou(gt, gt, inst, np.full(2, np.nan), 2)


class TestBoundaryMIoU:
    """Test mIoU restricted to GT boundary bands"""

    def setup_method(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[:, 4:] = 1
        self.gt = LabelMap(gt)
        rng = np.random.default_rng(2)
        self.pred = LabelMap(rng.integers(0, 2, size=(8, 8)))

    def test_huge_radius_equals_miou(self):
        """A radius beyond the image diagonal should give plain mIoU"""
        score, _ = miou(confusion_from_maps([self.pred], [self.gt], 2))
        assert boundary_miou(self.pred, self.gt, 100, 2) == pytest.approx(score)

    def test_constant_gt(self):
        """No boundaries should make the metric undefined"""
        with pytest.raises(UndefinedMetricError):
            boundary_miou(self.pred, LabelMap(np.zeros((8, 8))), 5, 2)

    def test_radius_one_matches_brute_force(self):
        """Radius 1 on a two-region map should match a masked confusion count"""
        mask = np.zeros((8, 8), dtype=bool)
        mask[:, 2:6] = True
        np.testing.assert_array_equal(boundary_mask(self.gt, 1), mask)
        cm = brute_force_confusion(self.pred.values, self.gt.values, 2, mask)
        tp = np.diag(cm)
        union = cm.sum(axis=0) + cm.sum(axis=1) - tp
        assert boundary_miou(self.pred, self.gt, 1, 2) == pytest.approx(100.0 * np.mean(tp / union))

    def test_radius_below_one(self):
        with pytest.raises(ArgumentError):
            boundary_mask(self.gt, 0)


class TestFeatureDiagnostics:
    """Test alignment and uniformity of class features"""

    def test_identical_features(self):
        """Identical features per class should give zero alignment"""
        assert alignment([np.ones((4, 3)), np.zeros((2, 3))]) == 0.0

    def test_two_vectors(self):
        """Two unit vectors at distance 1 should give (0 + 1 + 1 + 0) / 4"""
        group = np.array([[1.0, 0.0], [0.5, np.sqrt(3) / 2]])
        assert alignment([group]) == pytest.approx(0.5)

    def test_alignment_matches_brute_force(self):
        rng = np.random.default_rng(3)
        groups = [rng.normal(size=(k, 4)) for k in (5, 1, 7)]
        expected = np.mean([sum(np.linalg.norm(a - b) for a in g for b in g) / len(g) ** 2 for g in groups])
        assert abs(alignment(groups + [np.zeros((0, 4))]) - expected) < 1e-10

    def test_alignment_all_empty(self):
        with pytest.raises(UndefinedMetricError):
            alignment([np.zeros((0, 2))])

    def test_two_centroids(self):
        """Two centroids at distance d should give U = U_1 = d"""
        centroids = np.array([[0.0, 0.0], [3.0, 4.0]])
        assert uniformity(centroids) == pytest.approx(5.0)
        assert neighborhood_uniformity(centroids, 1) == pytest.approx(5.0)

    def test_regular_simplex(self):
        """Equidistant centroids should give U = U_l for every l"""
        centroids = np.eye(4)
        for l in (1, 2, 3):
            assert neighborhood_uniformity(centroids, l) == pytest.approx(uniformity(centroids))

    def test_neighborhood_matches_sort_oracle(self):
        rng = np.random.default_rng(4)
        centroids = rng.normal(size=(5, 3))
        for l in (3, 4):
            total = 0.0
            for i in range(5):
                d = sorted(np.linalg.norm(centroids[i] - centroids[j]) for j in range(5) if j != i)
                total += sum(d[:l])
            assert neighborhood_uniformity(centroids, l) == pytest.approx(total / (5 * l), abs=1e-12)

    def test_translation_invariant(self):
        """Shifting every feature by one offset should leave A, U and U_l unchanged"""
        rng = np.random.default_rng(7)
        features = rng.normal(size=(30, 4))
        labels = np.arange(30) % 4
        base = feature_diagnostics(features, labels, 4, ls=(2,))
        shifted = feature_diagnostics(features + rng.normal(size=4) * 10.0, labels, 4, ls=(2,))
        assert shifted.A == pytest.approx(base.A, abs=1e-9)
        assert shifted.U == pytest.approx(base.U, abs=1e-9)
        assert shifted.U_l[2] == pytest.approx(base.U_l[2], abs=1e-9)

    def test_widest_neighborhood_equals_uniformity(self):
        """U_l over all N - 1 neighbours should equal U"""
        rng = np.random.default_rng(8)
        for n in (2, 4, 6):
            centroids = rng.normal(size=(n, 3))
            assert neighborhood_uniformity(centroids, n - 1) == pytest.approx(uniformity(centroids), abs=1e-12)

    def test_l_too_large(self):
        with pytest.raises(ArgumentError):
            neighborhood_uniformity(np.eye(3), 3)

    def test_diagnostics_clamp_l(self):
        """l = 5 over five classes should be clamped to 4"""
        rng = np.random.default_rng(5)
        features = rng.normal(size=(40, 3))
        labels = np.arange(40) % 5
        diag = feature_diagnostics(features, labels, 5, ls=(3, 5))
        mu, present = class_centroids(features, labels, 5)
        assert present.all()
        assert diag.U_l[5] == pytest.approx(neighborhood_uniformity(mu, 4))
        assert diag.U_l[3] == pytest.approx(neighborhood_uniformity(mu, 3))


class TestCosineProfile:
    """Test cosine similarity against error-edge distance"""

    def make_set(self, vectors, gt, pred, pixels):
        return EmbeddingSet(1, np.asarray(vectors, dtype=np.float64), gt, pred, pixels, shape=(3, 3))

    def test_vectors_on_anchor(self):
        """Error vectors equal to their anchor should give a mean of 1 in every filled bin"""
        vectors = np.tile([[0.0, 1.0]], (3, 1))
        emb = self.make_set(vectors, [0, 0, 0], [1, 1, 0], [[0, 0], [1, 1], [2, 2]])
        anchors = compute_anchors(emb, 2)
        values = np.full((3, 3), np.inf, dtype=np.float32)
        values[0, 0] = 0.0
        values[1, 1] = 2.5
        maps = {(0, 0): DistanceMap(values, np.zeros((3, 3), dtype=np.int64))}
        rows = cos_vs_distance_profile([emb], [anchors], [maps])
        filled = [r for r in rows if r.count]
        assert [(r.bin_lo, r.count) for r in filled] == [(0.0, 1), (2.0, 1)]
        assert all(r.mean_cos == pytest.approx(1.0) for r in filled)
        assert all(math.isnan(r.mean_cos) for r in rows if not r.count)

    def test_single_error_pixel(self):
        vectors = np.array([[1.0, 0.0], [0.0, 1.0]])
        emb = self.make_set(vectors, [0, 0], [1, 0], [[0, 0], [0, 1]])
        values = np.full((3, 3), np.inf, dtype=np.float32)
        values[0, 0] = 12.0
        maps = {(0, 0): DistanceMap(values, np.zeros((3, 3), dtype=np.int64))}
        rows = cos_vs_distance_profile([emb], [compute_anchors(emb, 1)], [maps])
        filled = [r for r in rows if r.count]
        assert len(filled) == 1
        assert filled[0].bin_lo == 10.0
        assert math.isinf(filled[0].bin_hi)
        assert filled[0].mean_cos == pytest.approx(np.sqrt(0.5))

    def test_csv_columns(self, tmp_path):
        vectors = np.array([[1.0, 0.0]])
        emb = self.make_set(vectors, [0], [1], [[0, 0]])
        maps = {(0, 0): DistanceMap(np.zeros((3, 3), dtype=np.float32), np.zeros((3, 3), dtype=np.int64))}
        rows = cos_vs_distance_profile([emb], [compute_anchors(emb, 1)], [maps])
        frame = write_profile_csv(tmp_path / 'profile.csv', rows)
        assert list(frame.columns) == PROFILE_COLUMNS
        assert len(frame) == 11
        assert (tmp_path / 'profile.csv').read_text().splitlines()[0] == ','.join(PROFILE_COLUMNS)

    def test_boundary_vs_interior(self):
        """The first bin and every bin from distance 3 on should be averaged by count"""
        rows = [ProfileRow(1, 0.0, 1.0, 2, 0.2), ProfileRow(1, 1.0, 2.0, 5, 0.9),
                ProfileRow(1, 3.0, 5.0, 1, 0.4), ProfileRow(1, 5.0, math.inf, 3, 0.8),
                ProfileRow(2, 0.0, 1.0, 0, 0.0), ProfileRow(2, 3.0, 5.0, 4, 0.5)]
        trend = boundary_vs_interior(rows)
        assert trend[1]['boundary'] == pytest.approx(0.2)
        assert trend[1]['interior'] == pytest.approx((0.4 + 3 * 0.8) / 4)
        assert trend[2] == {'boundary': None, 'interior': pytest.approx(0.5)}
