"""
Test cases for class anchors and anchor fusion
"""
import numpy as np
import pytest

from contextrast.anchors import (SOURCE_FUSED, SOURCE_HIGH_ONLY, SOURCE_IDENTITY, SOURCE_OWN, AnchorSet,
                                 anchor_backward, compute_anchors, fuse_anchors, fuse_layers, fusion_backward,
                                 shared_layer_index)
from contextrast.exceptions import ArgumentError
from contextrast.feature_store import IGNORE, EmbeddingSet
from tests.helpers import unit_rows


def make_set(vectors, gt, layer=1, flagged=None):
    m = len(gt)
    return EmbeddingSet(layer, np.asarray(vectors, dtype=np.float64), gt, gt, np.zeros((m, 2)),
                        flagged=flagged, shape=(1, 1))


def anchor_set(layer, anchors, valid):
    anchors = np.asarray(anchors, dtype=np.float64)
    counts = np.asarray(valid, dtype=np.int64)
    return AnchorSet(layer, anchors, anchors.copy(), np.linalg.norm(anchors, axis=1), counts,
                     np.zeros(len(anchors), dtype=bool))


class TestComputeAnchors:
    """Test class-mean anchors"""

    def test_singleton_class(self):
        """One vector of class 2 should be that class's anchor, others invalid"""
        v = np.array([[0.6, 0.8]])
        out = compute_anchors(make_set(v, [2]), 3)
        np.testing.assert_allclose(out.anchors[2], v[0])
        assert out.valid.tolist() == [False, False, True]

    def test_antipodal_vectors_are_degenerate(self):
        """Two opposite unit vectors should cancel and flag the class"""
        out = compute_anchors(make_set([[1.0, 0.0], [-1.0, 0.0]], [0, 0]), 1)
        assert out.degenerate[0]
        assert not out.valid[0]
        assert np.all(out.anchors[0] == 0.0)

    def test_matches_brute_force_mean(self):
        """50 random vectors over 3 classes should match a direct mean and normalize"""
        rng = np.random.default_rng(0)
        vectors = unit_rows(rng, 50, 6)
        gt = rng.integers(0, 3, size=50)
        out = compute_anchors(make_set(vectors, gt), 3)
        for n in range(3):
            members = [vectors[k] for k in range(50) if gt[k] == n]
            mean = sum(members) / len(members)
            np.testing.assert_allclose(out.anchors[n], mean / np.sqrt(np.dot(mean, mean)), atol=1e-9)
            assert out.counts[n] == len(members)

    def test_flagged_and_ignored_entries_skipped(self):
        """Flagged vectors and IGNORE labels should not enter the mean"""
        vectors = [[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
        out = compute_anchors(make_set(vectors, [0, 0, IGNORE], flagged=[False, True, False]), 1)
        np.testing.assert_allclose(out.anchors[0], [1.0, 0.0])
        assert out.counts[0] == 1

    def test_empty_set(self):
        """An empty set should give an all-invalid anchor set"""
        out = compute_anchors(make_set(np.zeros((0, 3)), []), 4)
        assert not out.valid.any()

    def test_class_out_of_range(self):
        with pytest.raises(ArgumentError):
            compute_anchors(make_set([[1.0, 0.0]], [5]), 3)

    def test_permutation_invariant(self):
        """Shuffling the vectors should not change the anchors"""
        rng = np.random.default_rng(4)
        vectors = unit_rows(rng, 40, 5)
        gt = rng.integers(0, 3, size=40)
        expected = compute_anchors(make_set(vectors, gt), 3)
        for _ in range(50):
            order = rng.permutation(40)
            out = compute_anchors(make_set(vectors[order], gt[order]), 3)
            np.testing.assert_allclose(out.anchors, expected.anchors, atol=1e-12)
            np.testing.assert_array_equal(out.counts, expected.counts)

    def test_means_combine_over_batches(self):
        """The mean of a whole batch should be the count-weighted mean of its parts"""
        rng = np.random.default_rng(5)
        vectors = unit_rows(rng, 60, 4)
        gt = rng.integers(0, 3, size=60)
        whole = compute_anchors(make_set(vectors, gt), 3)
        first = compute_anchors(make_set(vectors[:25], gt[:25]), 3)
        second = compute_anchors(make_set(vectors[25:], gt[25:]), 3)
        combined = (first.means * first.counts[:, None] + second.means * second.counts[:, None])
        combined /= (first.counts + second.counts)[:, None]
        np.testing.assert_allclose(whole.means, combined, atol=1e-12)


class TestFuseAnchors:
    """Test injecting shared high-level context into per-layer anchors"""

    def setup_method(self):
        rng = np.random.default_rng(1)
        self.low = anchor_set(1, unit_rows(rng, 3, 4), [1, 1, 0])
        self.high = anchor_set(4, unit_rows(rng, 3, 4), [1, 1, 1])

    def test_high_weight_one(self):
        """w_h = 1 should copy the shared anchors for every valid class"""
        fused = fuse_anchors(self.low, self.high, 0.0, 1.0)
        np.testing.assert_array_equal(fused.anchors, self.high.anchors)

    def test_high_weight_zero(self):
        """w_h = 0 should keep the layer's own anchor where it is valid"""
        fused = fuse_anchors(self.low, self.high, 1.0, 0.0)
        np.testing.assert_array_equal(fused.anchors[:2], self.low.anchors[:2])
        np.testing.assert_array_equal(fused.anchors[2], self.high.anchors[2])
        assert fused.source[2] == SOURCE_HIGH_ONLY

    def test_weighted_sum_matches_brute_force(self):
        """w_h = 0.7 should equal the normalized weighted sum"""
        fused = fuse_anchors(self.low, self.high, 0.3, 0.7)
        for n in range(2):
            mixed = 0.3 * self.low.anchors[n] + 0.7 * self.high.anchors[n]
            np.testing.assert_allclose(fused.anchors[n], mixed / np.linalg.norm(mixed), atol=1e-12)
            assert fused.source[n] == SOURCE_FUSED
        assert fused.valid.all()

    def test_shared_layer_is_identity(self):
        """Fusing the shared layer with itself should return it unchanged"""
        fused = fuse_anchors(self.high, self.high, 0.3, 0.7)
        np.testing.assert_array_equal(fused.anchors, self.high.anchors)
        assert np.all(fused.source == SOURCE_IDENTITY)

    def test_missing_shared_class_is_invalid(self):
        """A class absent from the shared layer should be invalid after fusion"""
        high = anchor_set(4, self.high.anchors, [1, 0, 1])
        fused = fuse_anchors(self.low, high, 0.3, 0.7)
        assert not fused.valid[1]

    def test_dimension_mismatch(self):
        with pytest.raises(ArgumentError):
            fuse_anchors(self.low, anchor_set(4, np.eye(3), [1, 1, 1]), 0.3, 0.7)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ArgumentError):
            fuse_anchors(self.low, self.high, 0.5, 0.7)

    def test_shared_layer_index(self):
        assert shared_layer_index(4) == 3
        assert shared_layer_index(4, 'lowest') == 0
        with pytest.raises(ArgumentError):
            shared_layer_index(4, 'middle')

    def test_cosine_to_shared_grows_with_weight(self):
        """Raising w_h should move every fused anchor toward the shared one"""
        weights = np.linspace(0.0, 1.0, 11)
        cosines = []
        for w_h in weights:
            fused = fuse_anchors(self.low, self.high, 1.0 - w_h, w_h)
            cosines.append(np.sum(fused.anchors[:2] * self.high.anchors[:2], axis=1))
        cosines = np.array(cosines)
        assert np.all(np.diff(cosines, axis=0) >= -1e-12)
        np.testing.assert_allclose(cosines[-1], 1.0, atol=1e-12)

    def test_fuse_layers_keeps_unshared_layers(self):
        """Layers outside shared_layers should keep their own anchors"""
        rng = np.random.default_rng(6)
        layers = [anchor_set(i, unit_rows(rng, 3, 4), [1, 1, 1]) for i in range(1, 5)]
        fused, shared = fuse_layers(layers, 0.3, 0.7, shared_layers=(2, 4))
        assert shared == 3
        for i in (0, 2):
            np.testing.assert_array_equal(fused[i].anchors, layers[i].anchors)
            assert np.all(fused[i].source == SOURCE_OWN)
        assert np.all(fused[1].source == SOURCE_FUSED)
        assert np.all(fused[3].source == SOURCE_IDENTITY)


class TestAnchorBackward:
    """Test the chain from fused anchors back to member vectors"""

    def test_fusion_backward_matches_finite_differences(self):
        """fusion_backward should match central differences of a linear functional"""
        rng = np.random.default_rng(2)
        low = anchor_set(1, unit_rows(rng, 2, 3), [1, 1])
        high = anchor_set(4, unit_rows(rng, 2, 3), [1, 1])
        upstream = rng.normal(size=(2, 3))
        fused = fuse_anchors(low, high, 0.3, 0.7)
        g_low, g_high = fusion_backward(fused, upstream)

        def value(lo, hi):
            mixed = 0.3 * lo + 0.7 * hi
            return float(np.sum(upstream * mixed / np.linalg.norm(mixed, axis=1, keepdims=True)))

        h = 1e-6
        for which, analytic in (('low', g_low), ('high', g_high)):
            for n in range(2):
                for k in range(3):
                    lo, hi = low.anchors.copy(), high.anchors.copy()
                    target = lo if which == 'low' else hi
                    target[n, k] += h
                    plus = value(lo, hi)
                    target[n, k] -= 2 * h
                    minus = value(lo, hi)
                    assert abs(analytic[n, k] - (plus - minus) / (2 * h)) < 1e-6

    def test_anchor_backward_matches_finite_differences(self):
        """anchor_backward should match central differences through mean and normalize"""
        rng = np.random.default_rng(3)
        vectors = unit_rows(rng, 6, 3)
        gt = np.array([0, 1, 0, 1, 0, 1])
        upstream = rng.normal(size=(2, 3))
        emb = make_set(vectors, gt)
        grad = anchor_backward(compute_anchors(emb, 2), upstream, emb)

        def value(v):
            return float(np.sum(upstream * compute_anchors(make_set(v, gt), 2).anchors))

        h = 1e-6
        for j in range(6):
            for k in range(3):
                v = vectors.copy()
                v[j, k] += h
                plus = value(v)
                v[j, k] -= 2 * h
                minus = value(v)
                assert abs(grad[j, k] - (plus - minus) / (2 * h)) < 1e-6
