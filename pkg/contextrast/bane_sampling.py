"""
Boundary-Aware Negative Sampling
Class-wise error maps, exact Euclidean distance transform to error-region
edges and lower-K% hard-negative selection
"""
import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from . import settings
from .exceptions import ArgumentError
from .feature_store import IGNORE

logger = logging.getLogger(__name__)

DEFAULT_NEGATIVE_CAP = 1024

# No-site marker inside the kernel; never added to another value
_INF = 1 << 62


@dataclass(frozen=True, eq=False)
class BinaryErrorMap:
    """Pixels whose GT is `class_id` but whose prediction is not"""
    class_id: int
    layer: int
    mask: np.ndarray
    image: int = 0

    @property
    def count(self):
        return int(self.mask.sum())


@dataclass(frozen=True, eq=False)
class EdgeSet:
    """Error pixels with a non-error 4-neighbour or on the image border, row-major (row, col)"""
    coords: np.ndarray

    def __len__(self):
        return self.coords.shape[0]


@dataclass(frozen=True, eq=False)
class DistanceMap:
    """Distance to the nearest edge pixel, finite only on error pixels"""
    values: np.ndarray
    squared: np.ndarray


@dataclass(frozen=True, eq=False)
class SelectionSet:
    """Hard-negative candidates of one class, nearest to the error edge first"""
    class_id: int
    ratio: float
    indices: np.ndarray
    squared: np.ndarray
    error_pixels: int = 0

    def __len__(self):
        return self.indices.shape[0]

    @property
    def distances(self):
        return np.sqrt(self.squared.astype(np.float64))


@dataclass
class BatchSelection:
    """Per-class selections of one layer over a batch, plus the maps behind them"""
    selections: list
    error_pixels: np.ndarray
    maps: dict = field(default_factory=dict)


def error_map(pred, gt, class_id, layer=0, image=0):
    """B(u,v) = 1 iff gt = n and pred != n; IGNORE pixels are never errors"""
    if pred.shape != gt.shape:
        raise ArgumentError(f"Prediction {pred.shape} and GT {gt.shape} differ in size")
    mask = (gt.values == class_id) & (pred.values != class_id) & (gt.values != IGNORE)
    return BinaryErrorMap(class_id, layer, mask, image)


def _edge_mask(masks):
    # (B, h, w) masks; outside the image counts as non-error
    padded = np.pad(masks, ((0, 0), (1, 1), (1, 1)), constant_values=False)
    interior = (padded[:, :-2, 1:-1] & padded[:, 2:, 1:-1] & padded[:, 1:-1, :-2] & padded[:, 1:-1, 2:])
    return masks & ~interior


def extract_edges(emap):
    edges = _edge_mask(emap.mask[None])[0]
    return EdgeSet(np.argwhere(edges).astype(np.int64))


@njit(cache=True, nogil=True)
def _lower_envelope(f, out, v, z):
    # Squared distance transform of one line of sampled values (INF = no site)
    n = f.shape[0]
    k = -1
    for q in range(n):
        if f[q] >= _INF:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        s = 0.0
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    if k < 0:
        for q in range(n):
            out[q] = _INF
        return
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        d = q - v[j]
        out[q] = d * d + f[v[j]]


@njit(cache=True, nogil=True)
def _squared_edt_kernel(sites):
    h, w = sites.shape
    n = max(h, w)
    v = np.empty(n, np.int64)
    z = np.empty(n + 1, np.float64)
    tmp = np.empty((h, w), np.int64)
    out = np.empty((h, w), np.int64)
    col = np.empty(h, np.int64)
    col_out = np.empty(h, np.int64)
    for c in range(w):
        for r in range(h):
            col[r] = 0 if sites[r, c] else _INF
        _lower_envelope(col, col_out, v, z)
        for r in range(h):
            tmp[r, c] = col_out[r]
    row = np.empty(w, np.int64)
    row_out = np.empty(w, np.int64)
    for r in range(h):
        for c in range(w):
            row[c] = tmp[r, c]
        _lower_envelope(row, row_out, v, z)
        for c in range(w):
            out[r, c] = row_out[c]
    return out


@njit(parallel=True, cache=True)
def _squared_edt_stack(sites):
    b, h, w = sites.shape
    out = np.empty((b, h, w), np.int64)
    for i in prange(b):
        out[i] = _squared_edt_kernel(sites[i])
    return out


def squared_edt(sites):
    """Exact squared Euclidean distance to the nearest True pixel; -1 if there is none"""
    sites = np.ascontiguousarray(sites, dtype=np.uint8)
    out = _squared_edt_kernel(sites)
    out[out >= _INF] = -1
    return out


def brute_force_squared_edt(sites):
    """O(P * E) reference for squared_edt"""
    sites = np.asarray(sites, dtype=bool)
    h, w = sites.shape
    coords = np.argwhere(sites)
    if coords.size == 0:
        return np.full((h, w), -1, dtype=np.int64)
    rr, cc = np.mgrid[0:h, 0:w]
    dr = rr.reshape(-1, 1) - coords[:, 0].reshape(1, -1)
    dc = cc.reshape(-1, 1) - coords[:, 1].reshape(1, -1)
    return (dr * dr + dc * dc).min(axis=1).reshape(h, w).astype(np.int64)


def distance_transform(emap, edges):
    """Distance from every error pixel to the nearest edge pixel"""
    if emap.mask.any():
        assert len(edges) > 0, "non-empty error region without edge pixels"
    sites = np.zeros(emap.mask.shape, dtype=bool)
    if len(edges):
        sites[edges.coords[:, 0], edges.coords[:, 1]] = True
    return _distance_map(emap.mask, squared_edt(sites))


def _distance_map(mask, squared):
    squared = np.where(mask, squared, -1)
    values = np.where(mask, np.sqrt(np.maximum(squared, 0).astype(np.float64)), np.inf)
    return DistanceMap(values.astype(np.float32), squared)


def selection_size(ratio, count):
    if ratio <= 0 or count == 0:
        return 0
    return max(1, min(count, int(math.floor(ratio * count / 100.0))))


def select_negatives(dist, emap, embedding_set, ratio):
    """Error pixels with the lowest K% distances, ties broken row-major"""
    if not 0 <= ratio <= 100:
        raise ArgumentError(f"Sampling ratio must be within [0, 100], got {ratio}")
    rows, cols = np.nonzero(emap.mask)
    count = rows.size
    take = selection_size(ratio, count)
    squared = dist.squared[rows, cols]
    order = np.lexsort((rows * emap.mask.shape[1] + cols, squared))[:take]
    indices = embedding_set.lookup(np.full(take, emap.image), rows[order], cols[order])
    keep = indices >= 0
    return SelectionSet(emap.class_id, ratio, indices[keep], squared[order][keep], count)


def merge_selections(parts, class_id, ratio):
    """Union of per-image selections of one class, ordered by (distance, index)"""
    errors = sum(p.error_pixels for p in parts)
    parts = [p for p in parts if len(p)]
    if not parts:
        return SelectionSet(class_id, ratio, np.zeros(0, np.int64), np.zeros(0, np.int64), errors)
    indices = np.concatenate([p.indices for p in parts])
    squared = np.concatenate([p.squared for p in parts])
    order = np.lexsort((indices, squared))
    return SelectionSet(class_id, ratio, indices[order], squared[order], errors)


def build_negative_pools(selections, embedding_set, n_classes, cap=DEFAULT_NEGATIVE_CAP):
    """Negatives of anchor c: union of selection(n) for every n != c, closest first"""
    pools = []
    flagged = embedding_set.flagged
    for c in range(n_classes):
        chosen = [s for s in selections if s.class_id != c and len(s)]
        if not chosen:
            pools.append(np.zeros(0, dtype=np.int64))
            continue
        idx = np.concatenate([s.indices for s in chosen])
        sq = np.concatenate([s.squared for s in chosen])
        keep = ~flagged[idx]
        idx, sq = idx[keep], sq[keep]
        order = np.lexsort((idx, sq))
        idx, sq = idx[order], sq[order]
        _, first = np.unique(idx, return_index=True)
        first.sort()
        pools.append(idx[first][:cap])
    return pools


def squared_edt_stack(sites, threads=None):
    """squared_edt over a (B, h, w) stack, one image per numba thread"""
    sites = np.ascontiguousarray(sites, dtype=np.uint8)
    workers = max(1, min(threads or settings.worker_count(), numba.config.NUMBA_NUM_THREADS))
    previous = numba.get_num_threads()
    numba.set_num_threads(workers)
    try:
        out = _squared_edt_stack(sites)
    finally:
        numba.set_num_threads(previous)
    out[out >= _INF] = -1
    return out


def _select_class(masks, embedding_set, class_id, ratio, threads):
    """Lowest-K% error pixels of every image for one class, merged by (distance, index)"""
    squared = squared_edt_stack(_edge_mask(masks), threads)
    image, rows, cols = np.nonzero(masks)
    counts = np.bincount(image, minlength=masks.shape[0])
    empty = np.zeros(0, np.int64)
    if image.size == 0 or ratio <= 0:
        return SelectionSet(class_id, ratio, empty, empty, int(counts.sum())), squared
    sq = squared[image, rows, cols]
    order = np.lexsort((rows * masks.shape[2] + cols, sq, image))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(order.size) - starts[image[order]]
    take = np.array([selection_size(ratio, int(c)) for c in counts])
    order = order[rank < take[image[order]]]
    indices = embedding_set.lookup(image[order], rows[order], cols[order])
    keep = indices >= 0
    indices, sq = indices[keep], sq[order][keep]
    merged = np.lexsort((indices, sq))
    return SelectionSet(class_id, ratio, indices[merged], sq[merged], int(counts.sum())), squared


def select_batch(embedding_set, preds, gts, n_classes, ratio, threads=None, keep_maps=False):
    """Per-(image, class) error maps and selections for one layer of a batch

    Each class is one stacked pass; distance transforms of the images run on
    numba threads and the result does not depend on the thread count.
    """
    if not 0 <= ratio <= 100:
        raise ArgumentError(f"Sampling ratio must be within [0, 100], got {ratio}")
    pred = np.stack([p.values for p in preds])
    gt = np.stack([g.values for g in gts])
    if pred.shape != gt.shape:
        raise ArgumentError(f"Prediction {pred.shape} and GT {gt.shape} differ in size")
    selections = []
    errors = np.zeros(n_classes, dtype=np.int64)
    maps = {}
    for n in range(n_classes):
        masks = (gt == n) & (pred != n) & (gt != IGNORE)
        selection, squared = _select_class(masks, embedding_set, n, ratio, threads)
        selections.append(selection)
        errors[n] = selection.error_pixels
        if keep_maps:
            for b in np.flatnonzero(masks.any(axis=(1, 2))):
                emap = BinaryErrorMap(n, embedding_set.layer, masks[b], int(b))
                maps[(int(b), n)] = (emap, _distance_map(masks[b], squared[b]))
    return BatchSelection(selections, errors, maps)
