"""
Representative Anchors
Class-wise per-layer anchors and their fusion with the shared high-level anchors
"""
import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import ArgumentError
from .feature_store import ZERO_NORM

logger = logging.getLogger(__name__)

ANCHOR_SOURCES = ('highest', 'lowest')

# FusedAnchorSet.source codes
SOURCE_INVALID = 0
SOURCE_FUSED = 1
SOURCE_HIGH_ONLY = 2
SOURCE_LOW_ONLY = 3
SOURCE_IDENTITY = 4
SOURCE_OWN = 5


@dataclass(frozen=True, eq=False)
class AnchorSet:
    """Normalized class means of one layer"""
    layer: int
    anchors: np.ndarray
    means: np.ndarray
    norms: np.ndarray
    counts: np.ndarray
    degenerate: np.ndarray

    @property
    def n_classes(self):
        return self.anchors.shape[0]

    @property
    def dim(self):
        return self.anchors.shape[1]

    @property
    def valid(self):
        return (self.counts > 0) & ~self.degenerate


@dataclass(frozen=True, eq=False)
class FusedAnchorSet:
    """Anchors of one layer after injecting the shared layer's context"""
    layer: int
    anchors: np.ndarray
    valid: np.ndarray
    source: np.ndarray
    pre_norms: np.ndarray
    w_l: float
    w_h: float

    @property
    def n_classes(self):
        return self.anchors.shape[0]


def shared_layer_index(n_layers, source='highest'):
    """0-based index of the layer whose anchors are shared with every layer"""
    if source not in ANCHOR_SOURCES:
        raise ArgumentError(f"Unknown anchor source {source!r}")
    return n_layers - 1 if source == 'highest' else 0


def compute_anchors(embedding_set, n_classes):
    """Mean of each class's vectors, re-normalized; flagged entries are skipped"""
    d = embedding_set.dim
    means = np.zeros((n_classes, d), dtype=np.float64)
    counts = np.zeros(n_classes, dtype=np.int64)
    usable = embedding_set.usable
    gt = embedding_set.gt
    if usable.any() and int(gt[usable].max()) >= n_classes:
        raise ArgumentError(f"GT class {int(gt[usable].max())} out of range for {n_classes} classes")
    vectors = np.asarray(embedding_set.vectors, dtype=np.float64)
    for n in range(n_classes):
        members = usable & (gt == n)
        counts[n] = int(members.sum())
        if counts[n]:
            means[n] = vectors[members].sum(axis=0) / counts[n]
    norms = np.linalg.norm(means, axis=1)
    degenerate = (counts > 0) & (norms <= ZERO_NORM)
    for n in np.flatnonzero(degenerate):
        logger.warning(f"Anchor of class {n} on layer {embedding_set.layer} cancelled to zero")
    valid = (counts > 0) & ~degenerate
    anchors = np.zeros_like(means)
    anchors[valid] = means[valid] / norms[valid, None]
    return AnchorSet(embedding_set.layer, anchors, means, norms, counts, degenerate)


def fuse_anchors(low, high, w_l, w_h):
    """w_l * A_i + w_h * A_shared, re-normalized; the shared layer is returned as-is"""
    if low.n_classes != high.n_classes or low.dim != high.dim:
        raise ArgumentError(
            f"Cannot fuse anchors of shape {low.anchors.shape} with {high.anchors.shape}")
    if w_l < 0 or w_h < 0 or abs(w_l + w_h - 1.0) > 1e-9:
        raise ArgumentError(f"Fusion weights must be non-negative and sum to 1, got {w_l}, {w_h}")
    n = low.n_classes
    anchors = np.zeros_like(high.anchors)
    source = np.full(n, SOURCE_INVALID, dtype=np.int64)
    pre_norms = np.ones(n, dtype=np.float64)
    hv, lv = high.valid, low.valid
    if low.layer == high.layer:
        anchors[hv] = high.anchors[hv]
        source[hv] = SOURCE_IDENTITY
        return FusedAnchorSet(low.layer, anchors, hv.copy(), source, pre_norms, w_l, w_h)

    both = hv & lv
    only_high = hv & ~lv
    anchors[only_high] = high.anchors[only_high]
    source[only_high] = SOURCE_HIGH_ONLY
    if w_h == 1.0:
        anchors[both] = high.anchors[both]
        source[both] = SOURCE_HIGH_ONLY
    elif w_h == 0.0:
        anchors[both] = low.anchors[both]
        source[both] = SOURCE_LOW_ONLY
    else:
        mixed = w_l * low.anchors + w_h * high.anchors
        norms = np.linalg.norm(mixed, axis=1)
        ok = both & (norms > ZERO_NORM)
        anchors[ok] = mixed[ok] / norms[ok, None]
        pre_norms[ok] = norms[ok]
        source[ok] = SOURCE_FUSED
    valid = source != SOURCE_INVALID
    return FusedAnchorSet(low.layer, anchors, valid, source, pre_norms, w_l, w_h)


def unfused_anchors(anchor_set):
    """A layer's own anchors in fused form, for layers left out of sharing"""
    valid = anchor_set.valid.copy()
    source = np.where(valid, SOURCE_OWN, SOURCE_INVALID).astype(np.int64)
    return FusedAnchorSet(anchor_set.layer, anchor_set.anchors.copy(), valid, source,
                          np.ones(anchor_set.n_classes, dtype=np.float64), 1.0, 0.0)


def fuse_layers(anchors, w_l, w_h, source='highest', shared_layers=None):
    """Fused anchors of every layer and the 0-based index of the shared layer

    `anchors` is ordered by layer (index 0 = layer 1). Only 1-based layers in
    `shared_layers` take the shared context; None shares with every layer.
    """
    shared = shared_layer_index(len(anchors), source)
    fused = []
    for i, a in enumerate(anchors):
        if shared_layers is None or i + 1 in shared_layers:
            fused.append(fuse_anchors(a, anchors[shared], w_l, w_h))
        else:
            fused.append(unfused_anchors(a))
    return fused, shared


def _normalize_backward(unit, norm, grad):
    # d(u/|u|)/du applied to grad: (I - a a^T) grad / |u|
    return (grad - unit * (unit @ grad)) / norm


def fusion_backward(fused, grad):
    """Split dL/d(fused anchors) into dL/dA_i and dL/dA_shared"""
    grad = np.asarray(grad, dtype=np.float64)
    grad_low = np.zeros_like(grad)
    grad_high = np.zeros_like(grad)
    for n in range(fused.n_classes):
        src = fused.source[n]
        if src in (SOURCE_IDENTITY, SOURCE_HIGH_ONLY):
            grad_high[n] += grad[n]
        elif src in (SOURCE_LOW_ONLY, SOURCE_OWN):
            grad_low[n] += grad[n]
        elif src == SOURCE_FUSED:
            du = _normalize_backward(fused.anchors[n], fused.pre_norms[n], grad[n])
            grad_low[n] += fused.w_l * du
            grad_high[n] += fused.w_h * du
    return grad_low, grad_high


def anchor_backward(anchor_set, grad, embedding_set):
    """Chain dL/dA through normalization and the class mean into member vectors"""
    grad = np.asarray(grad, dtype=np.float64)
    out = np.zeros((len(embedding_set), embedding_set.dim), dtype=np.float64)
    usable = embedding_set.usable
    for n in np.flatnonzero(anchor_set.valid):
        if not np.any(grad[n]):
            continue
        dm = _normalize_backward(anchor_set.anchors[n], anchor_set.norms[n], grad[n])
        members = usable & (embedding_set.gt == n)
        out[members] += dm / anchor_set.counts[n]
    return out
