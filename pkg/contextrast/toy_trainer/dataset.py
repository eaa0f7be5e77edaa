"""
Synthetic Shapes Dataset
Noisy 4-class images (background, disk, rectangle, stripe) with label and instance maps
"""
import logging
from dataclasses import dataclass

import numpy as np

from ..exceptions import ArgumentError
from ..feature_store import LabelMap
from .rng import CounterRNG, DATASET_EVAL, DATASET_TRAIN, stream_id

logger = logging.getLogger(__name__)

CLASS_NAMES = ('background', 'disk', 'rectangle', 'stripe')
N_CLASSES = len(CLASS_NAMES)
BACKGROUND, DISK, RECTANGLE, STRIPE = range(N_CLASSES)

# Base colours are close on purpose: at sigma 0.15 single pixels are ambiguous
BASE_COLORS = np.array([
    [0.45, 0.45, 0.50],
    [0.62, 0.42, 0.42],
    [0.42, 0.62, 0.44],
    [0.44, 0.44, 0.68],
], dtype=np.float64)

MIN_CLASS_PIXELS = 16
MAX_ATTEMPTS = 64
SPLITS = {'train': DATASET_TRAIN, 'eval': DATASET_EVAL}


@dataclass(frozen=True, eq=False)
class ShapeSample:
    image: np.ndarray
    labels: LabelMap
    instances: np.ndarray


class ShapesDataset:
    """Random-access stream of samples; sample i depends only on (seed, split, i)"""

    def __init__(self, seed=0, size=64, noise_sigma=0.15, split='train'):
        if split not in SPLITS:
            raise ArgumentError(f"Unknown dataset split {split!r}")
        if size < 8:
            raise ArgumentError(f"Shapes images need at least 8 pixels per side, got {size}")
        self.seed = seed
        self.size = size
        self.noise_sigma = noise_sigma
        self.split = split
        self.min_class_pixels = min(MIN_CLASS_PIXELS, size * size // 16)

    def _layout(self, rng):
        s = self.size
        labels = np.zeros((s, s), dtype=np.uint8)
        instances = np.zeros((s, s), dtype=np.int32)
        rr, cc = np.mgrid[0:s, 0:s]

        width = rng.integers(max(2, s // 16), max(3, s // 8) + 1)
        offset = rng.integers(0, s - width + 1)
        band = (rr >= offset) & (rr < offset + width)
        if rng.uniform() < 0.5:
            band = band.T
        labels[band] = STRIPE
        instances[band] = 1

        h = rng.integers(max(2, s // 6), max(3, s // 3) + 1)
        w = rng.integers(max(2, s // 6), max(3, s // 3) + 1)
        top = rng.integers(0, s - h + 1)
        left = rng.integers(0, s - w + 1)
        labels[top:top + h, left:left + w] = RECTANGLE
        instances[top:top + h, left:left + w] = 2

        for k in range(1 + (rng.uniform() < 0.5)):
            radius = rng.uniform(max(1.5, s / 14), max(2.5, s / 7))
            cy = rng.uniform(radius, s - radius)
            cx = rng.uniform(radius, s - radius)
            disk = (rr + 0.5 - cy) ** 2 + (cc + 0.5 - cx) ** 2 <= radius ** 2
            labels[disk] = DISK
            instances[disk] = 3 + k
        return labels, instances

    def sample(self, index):
        rng = CounterRNG(self.seed, stream_id(SPLITS[self.split], 0, index))
        for attempt in range(MAX_ATTEMPTS):
            labels, instances = self._layout(rng)
            if np.bincount(labels.ravel(), minlength=N_CLASSES).min() >= self.min_class_pixels:
                break
        else:
            logger.warning(f"Sample {index} kept after {MAX_ATTEMPTS} layouts with a sparse class")
        image = BASE_COLORS[labels]
        if self.noise_sigma > 0:
            image = image + rng.normal(image.shape, self.noise_sigma)
        return ShapeSample(image.astype(np.float32), LabelMap(labels), _relabel(instances))

    def batch(self, start, count):
        return [self.sample(start + k) for k in range(count)]


def _relabel(instances):
    # drop ids whose shape was fully painted over, keep the rest consecutive
    ids = np.unique(instances[instances > 0])
    lookup = np.zeros(int(instances.max()) + 1, dtype=np.int32)
    lookup[ids] = np.arange(1, len(ids) + 1, dtype=np.int32)
    return lookup[instances]


def generate(seed, count, size=64, noise_sigma=0.15, split='train'):
    if count <= 0:
        raise ArgumentError(f"Sample count must be positive, got {count}")
    return ShapesDataset(seed, size, noise_sigma, split).batch(0, count)


def class_presence(samples, min_pixels=MIN_CLASS_PIXELS):
    """Fraction of samples in which each class covers at least `min_pixels` pixels"""
    hits = np.zeros(N_CLASSES)
    for s in samples:
        hits += np.bincount(s.labels.values.ravel(), minlength=N_CLASSES)[:N_CLASSES] >= min_pixels
    return hits / len(samples)
