"""
Feature Store
Label maps, feature grids, the projection into the embedding space,
resolution alignment across encoder layers and flattening into embedding sets
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ArgumentError, ConfigurationError

IGNORE = 255

# Rows with a norm at or below this are treated as zero vectors
ZERO_NORM = 1e-12


def _frozen(array, dtype=None):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class ids with IGNORE sentinel"""
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[0] == 0 or values.shape[1] == 0:
            raise ArgumentError(f"LabelMap needs a non-empty 2-D grid, got shape {values.shape}")
        if values.min() < 0 or values.max() > IGNORE:
            raise ArgumentError("LabelMap values must fit in 0..255")
        object.__setattr__(self, 'values', _frozen(values, np.uint8))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def validate(self, n_classes):
        """Check every non-IGNORE value is below n_classes"""
        scored = self.values[self.values != IGNORE]
        if scored.size and int(scored.max()) >= n_classes:
            raise ArgumentError(f"Class id {int(scored.max())} out of range for {n_classes} classes")
        return self

    def __eq__(self, other):
        return isinstance(other, LabelMap) and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class FeatureGrid:
    """Per-layer feature or embedding grid, pixel-major then channel"""
    layer: int
    data: np.ndarray
    flagged: np.ndarray = None

    def __post_init__(self):
        data = np.asarray(self.data)
        dtype = np.float64 if data.dtype == np.float64 else np.float32
        if data.ndim != 3:
            raise ArgumentError(f"FeatureGrid needs (h, w, d) data, got shape {data.shape}")
        flagged = self.flagged
        if flagged is None:
            flagged = np.zeros(data.shape[:2], dtype=bool)
        object.__setattr__(self, 'data', _frozen(data, dtype))
        object.__setattr__(self, 'flagged', _frozen(flagged, bool))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def dim(self):
        return self.data.shape[2]

    def __eq__(self, other):
        return (isinstance(other, FeatureGrid) and self.layer == other.layer
                and np.array_equal(self.data, other.data)
                and np.array_equal(self.flagged, other.flagged))

    __hash__ = None


@dataclass(frozen=True)
class ProjectionHead:
    """1x1 linear map into the shared embedding dimension"""
    weight: np.ndarray
    bias: np.ndarray

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    @classmethod
    def identity(cls, dim):
        return cls(np.eye(dim, dtype=np.float32), np.zeros(dim, dtype=np.float32))

    @classmethod
    def random(cls, in_dim, out_dim, rng):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias"""
        bound = 1.0 / math.sqrt(in_dim)
        weight = rng.uniform(-bound, bound, (in_dim, out_dim)).astype(np.float32)
        return cls(weight, np.zeros(out_dim, dtype=np.float32))

    def embed(self, data):
        """(..., in_dim) features -> (unit vectors, norms, flagged)"""
        if data.shape[-1] != self.in_dim:
            raise ConfigurationError(
                f"Projection head expects {self.in_dim} channels, got {data.shape[-1]}",
                key='embed_dim')
        return normalize_rows(data @ self.weight + self.bias)


def normalize_rows(z):
    """L2-normalize the last axis; zero rows stay zero and are flagged

    Returns (unit vectors, norms, flagged) with norms computed in float64.
    """
    z64 = np.asarray(z, dtype=np.float64)
    norms = np.sqrt(np.einsum('...d,...d->...', z64, z64))
    flagged = norms <= ZERO_NORM
    safe = np.where(flagged, 1.0, norms)
    v = z64 / safe[..., None]
    v[flagged] = 0.0
    return v, norms, flagged


def project(raw, head):
    """Apply the projection head and normalize every pixel vector"""
    v, _, flagged = head.embed(raw.data.astype(np.float64))
    return FeatureGrid(raw.layer, v.astype(raw.data.dtype), flagged | raw.flagged)


def _center_indices(src, dst):
    # floor((dst + 0.5) * src / dst) in integer arithmetic
    idx = ((2 * np.arange(dst) + 1) * src) // (2 * dst)
    return np.minimum(idx, src - 1)


def downsample_labels(label_map, target):
    """Nearest-neighbour sampling at pixel centres; class ids are preserved"""
    h, w = target
    if h <= 0 or w <= 0:
        raise ArgumentError(f"Target size must be positive, got {target}")
    if h > label_map.height or w > label_map.width:
        raise ArgumentError(f"Target {target} exceeds source {label_map.shape}")
    if (h, w) == label_map.shape:
        return label_map
    rows = _center_indices(label_map.height, h)
    cols = _center_indices(label_map.width, w)
    return LabelMap(label_map.values[np.ix_(rows, cols)])


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Flattened embedding vectors with GT / predicted class and pixel coordinates"""
    layer: int
    vectors: np.ndarray
    gt: np.ndarray
    pred: np.ndarray
    pixels: np.ndarray
    image: np.ndarray = None
    flagged: np.ndarray = None
    shape: tuple = (0, 0)
    _keys: np.ndarray = field(default=None, repr=False)
    _order: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        vectors = np.asarray(self.vectors)
        if vectors.ndim != 2:
            raise ArgumentError(f"EmbeddingSet vectors must be (M, d), got {vectors.shape}")
        m = vectors.shape[0]
        image = np.zeros(m, dtype=np.int64) if self.image is None else self.image
        flagged = np.zeros(m, dtype=bool) if self.flagged is None else self.flagged
        pixels = np.asarray(self.pixels, dtype=np.int64).reshape(m, 2)
        for name, value in (('gt', self.gt), ('pred', self.pred), ('image', image), ('flagged', flagged)):
            if len(value) != m:
                raise ArgumentError(f"EmbeddingSet field {name} has {len(value)} entries, expected {m}")
        object.__setattr__(self, 'vectors', _frozen(vectors))
        object.__setattr__(self, 'gt', _frozen(self.gt, np.int64))
        object.__setattr__(self, 'pred', _frozen(self.pred, np.int64))
        object.__setattr__(self, 'pixels', _frozen(pixels, np.int64))
        object.__setattr__(self, 'image', _frozen(image, np.int64))
        object.__setattr__(self, 'flagged', _frozen(flagged, bool))
        if tuple(self.shape) == (0, 0) and m:
            object.__setattr__(self, 'shape', (int(pixels[:, 0].max()) + 1, int(pixels[:, 1].max()) + 1))
        h, w = self.shape
        keys = (self.image * h + self.pixels[:, 0]) * w + self.pixels[:, 1] if m else np.zeros(0, np.int64)
        order = np.argsort(keys, kind='stable')
        object.__setattr__(self, '_keys', keys[order])
        object.__setattr__(self, '_order', order)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def usable(self):
        """Entries that take part in anchors and losses"""
        return (~self.flagged) & (self.gt != IGNORE)

    def with_vectors(self, vectors):
        """Same entries carrying different vectors (used by finite differences)"""
        return EmbeddingSet(self.layer, vectors, self.gt, self.pred, self.pixels,
                            self.image, self.flagged, self.shape)

    def lookup(self, image, rows, cols):
        """Indices of the entries at the given pixels; -1 where absent"""
        h, w = self.shape
        wanted = (np.asarray(image, dtype=np.int64) * h + np.asarray(rows, dtype=np.int64)) * w \
            + np.asarray(cols, dtype=np.int64)
        if len(self) == 0:
            return np.full(wanted.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._keys, wanted)
        pos = np.minimum(pos, len(self) - 1)
        return np.where(self._keys[pos] == wanted, self._order[pos], -1)

    @classmethod
    def concat(cls, sets):
        """Stack per-image sets of one layer; image ids follow list order"""
        if not sets:
            raise ArgumentError("Cannot concatenate an empty list of embedding sets")
        shape = sets[0].shape
        layer = sets[0].layer
        for s in sets:
            if s.shape != shape or s.layer != layer or s.dim != sets[0].dim:
                raise ArgumentError("Embedding sets disagree on layer, shape or dimension")
        return cls(
            layer,
            np.concatenate([s.vectors for s in sets]),
            np.concatenate([s.gt for s in sets]),
            np.concatenate([s.pred for s in sets]),
            np.concatenate([s.pixels for s in sets]),
            np.concatenate([np.full(len(s), b, dtype=np.int64) for b, s in enumerate(sets)]),
            np.concatenate([s.flagged for s in sets]),
            shape,
        )


def flatten(grid, gt, pred, image=0):
    """One entry per non-IGNORE pixel, row-major"""
    if gt.shape != (grid.height, grid.width) or pred.shape != gt.shape:
        raise ArgumentError(
            f"Labels {gt.shape}/{pred.shape} do not match grid {(grid.height, grid.width)}")
    keep = gt.values != IGNORE
    rows, cols = np.nonzero(keep)
    return EmbeddingSet(
        layer=grid.layer,
        vectors=grid.data[rows, cols],
        gt=gt.values[rows, cols],
        pred=pred.values[rows, cols],
        pixels=np.stack([rows, cols], axis=1),
        image=np.full(rows.size, image, dtype=np.int64),
        flagged=grid.flagged[rows, cols],
        shape=(grid.height, grid.width),
    )


@dataclass(frozen=True)
class LayerGeometry:
    """Per-layer grid sizes of the reference encoder"""
    height: int
    width: int
    sizes: tuple

    @classmethod
    def for_image(cls, height, width, n_layers=4):
        sizes = tuple((-(-height // 2 ** k), -(-width // 2 ** k)) for k in range(n_layers))
        return cls(height, width, sizes)

    @property
    def n_layers(self):
        return len(self.sizes)

    def layer_size(self, layer):
        """Size of 1-based layer index"""
        return self.sizes[layer - 1]
