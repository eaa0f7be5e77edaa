"""
Test cases for the synthetic shapes dataset and counter-based random streams
"""
import numpy as np
import pytest

from contextrast.exceptions import ArgumentError
from contextrast.toy_trainer.dataset import BASE_COLORS, N_CLASSES, ShapesDataset, class_presence, generate
from contextrast.toy_trainer.rng import DATASET_TRAIN, NEGATIVES, CounterRNG, stream_id


class TestCounterRNG:
    """Test reproducible random streams"""

    def test_same_key_same_draws(self):
        a = CounterRNG(5, stream_id(DATASET_TRAIN, 0, 3))
        b = CounterRNG(5, stream_id(DATASET_TRAIN, 0, 3))
        np.testing.assert_array_equal(a.raw(8), b.raw(8))

    def test_streams_are_independent(self):
        a = CounterRNG(5, stream_id(NEGATIVES, 1, 0)).raw(4)
        b = CounterRNG(5, stream_id(NEGATIVES, 2, 0)).raw(4)
        assert not np.array_equal(a, b)

    def test_stream_id_layout(self):
        assert stream_id(5, 2, 7) == (5 << 56) | (2 << 48) | 7

    def test_uniform_range(self):
        u = CounterRNG(0, 1).uniform(2.0, 3.0, size=1000)
        assert u.min() >= 2.0
        assert u.max() < 3.0

    def test_integers_range(self):
        rng = CounterRNG(0, 2)
        values = [rng.integers(3, 6) for _ in range(200)]
        assert set(values) == {3, 4, 5}

    def test_normal_moments(self):
        z = CounterRNG(0, 3).normal((4001,), sigma=2.0)
        assert z.shape == (4001,)
        assert abs(z.mean()) < 0.15
        assert abs(z.std() - 2.0) < 0.15

    def test_choice_without_replacement(self):
        picks = CounterRNG(0, 4).choice(np.arange(10, 30), 7)
        assert len(set(picks.tolist())) == 7
        assert set(picks.tolist()) <= set(range(10, 30))

    def test_choice_follows_key_order(self):
        """Picks should be the smallest uniform keys in ascending key order"""
        for size in (0, 1, 5, 64, 300):
            keys = CounterRNG(7, 9)._unit(300)
            picks = CounterRNG(7, 9).choice(np.arange(300), size)
            np.testing.assert_array_equal(picks, np.argsort(keys, kind='stable')[:size])

    def test_choice_too_many(self):
        with pytest.raises(ValueError):
            CounterRNG(0, 4).choice(np.arange(3), 5)

    def test_seed_range(self):
        with pytest.raises(ValueError):
            CounterRNG(-1)


class TestShapesDataset:
    """Test generated images, labels and instances"""

    def test_regeneration_is_identical(self):
        """Sample 0 of seed 0 generated twice should be byte-identical"""
        a = ShapesDataset(0).sample(0)
        b = ShapesDataset(0).sample(0)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.labels == b.labels
        np.testing.assert_array_equal(a.instances, b.instances)

    def test_splits_differ(self):
        a = ShapesDataset(0, split='train').sample(0)
        b = ShapesDataset(0, split='eval').sample(0)
        assert not np.array_equal(a.image, b.image)

    def test_noise_free_colors_give_labels(self):
        """With sigma 0 labels should be recoverable from colours exactly"""
        sample = ShapesDataset(1, size=32, noise_sigma=0.0).sample(4)
        distance = ((sample.image[:, :, None, :] - BASE_COLORS[None, None].astype(np.float32)) ** 2).sum(axis=-1)
        np.testing.assert_array_equal(np.argmin(distance, axis=-1), sample.labels.values)

    def test_class_presence(self):
        """Every class should appear in at least 80% of 100 samples"""
        samples = generate(0, 100)
        presence = class_presence(samples)
        assert len(presence) == N_CLASSES
        assert np.all(presence >= 0.8)

    def test_instances_within_one_class(self):
        sample = ShapesDataset(2).sample(1)
        for k in np.unique(sample.instances[sample.instances > 0]):
            assert len(np.unique(sample.labels.values[sample.instances == k])) == 1

    def test_image_shape(self):
        sample = ShapesDataset(0, size=16).sample(0)
        assert sample.image.shape == (16, 16, 3)
        assert sample.image.dtype == np.float32
        assert sample.labels.shape == (16, 16)

    def test_batch_offsets(self):
        dataset = ShapesDataset(0, size=16)
        batch = dataset.batch(3, 2)
        assert batch[1].labels == dataset.sample(4).labels

    def test_invalid_arguments(self):
        with pytest.raises(ArgumentError):
            ShapesDataset(0, size=4)
        with pytest.raises(ArgumentError):
            ShapesDataset(0, split='test')
        with pytest.raises(ArgumentError):
            generate(0, 0)
