"""
Segmentation and Feature Metrics
mIoU, instance-weighted iIoU, boundary mIoU and embedding-space diagnostics
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial.distance import pdist, squareform

from .bane_sampling import squared_edt
from .exceptions import ArgumentError, FormatError, UndefinedMetricError
from .feature_store import IGNORE, LabelMap

logger = logging.getLogger(__name__)

# Unit distance bins [0,1) .. [9,10) followed by an overflow bin [10, inf)
PROFILE_EDGES = tuple(float(k) for k in range(11))
PROFILE_COLUMNS = ['layer', 'bin_lo', 'bin_hi', 'count', 'mean_cos']


def _values(label_map):
    return label_map.values if isinstance(label_map, LabelMap) else np.asarray(label_map)


class ConfusionMatrix:
    """N x N pixel counts, rows = GT class, cols = predicted class"""

    def __init__(self, n_classes, counts=None):
        self.n_classes = n_classes
        if counts is None:
            counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    def update(self, pred, gt, mask=None):
        """Add one prediction; IGNORE pixels and pixels outside `mask` are skipped"""
        pred, gt = _values(pred), _values(gt)
        if pred.shape != gt.shape:
            raise ArgumentError(f"Prediction {pred.shape} and GT {gt.shape} differ in size")
        scored = gt != IGNORE
        if mask is not None:
            scored &= mask
        p = pred[scored].astype(np.int64)
        g = gt[scored].astype(np.int64)
        if p.size and (p.max() >= self.n_classes or g.max() >= self.n_classes):
            raise ArgumentError(f"Class id out of range for {self.n_classes} classes")
        count = np.bincount(self.n_classes * g + p, minlength=self.n_classes ** 2)
        self.counts += count.reshape(self.n_classes, self.n_classes)
        return self

    def __add__(self, other):
        if self.n_classes != other.n_classes:
            raise ArgumentError("Cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def iou(self):
        """Per-class IoU; NaN where the class is absent from GT and prediction"""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=1) + self.counts.sum(axis=0) - tp
        out = np.full(self.n_classes, np.nan)
        np.divide(tp, union, out=out, where=union > 0)
        return out

    def pixel_accuracy(self):
        if self.total == 0:
            raise UndefinedMetricError("Pixel accuracy of an empty confusion matrix")
        return 100.0 * np.trace(self.counts) / self.total


def miou(cm):
    """(mean IoU in percent, per-class IoU in percent)"""
    per_class = cm.iou()
    if np.all(np.isnan(per_class)):
        raise UndefinedMetricError("mIoU is undefined: every class is empty")
    return 100.0 * float(np.nanmean(per_class)), 100.0 * per_class


def confusion_from_maps(preds, gts, n_classes):
    cm = ConfusionMatrix(n_classes)
    for pred, gt in zip(preds, gts):
        cm.update(pred, gt)
    return cm


# Instance-weighted IoU

@dataclass(frozen=True, eq=False)
class InstanceMap:
    """Per-pixel instance id, 0 = no instance"""
    values: np.ndarray

    def instances(self, gt):
        """[(instance id, GT class, size)] sorted by id; ids must not span classes"""
        ids = np.asarray(self.values)
        labels = _values(gt)
        if ids.shape != labels.shape:
            raise FormatError(f"Instance map {ids.shape} does not match GT {labels.shape}", 0)
        out = []
        for k in np.unique(ids[ids > 0]):
            classes = np.unique(labels[ids == k])
            if classes.size != 1:
                raise FormatError(f"Instance {int(k)} covers GT classes {classes.tolist()}", 0)
            out.append((int(k), int(classes[0]), int((ids == k).sum())))
        return out


def average_instance_sizes(gts, insts, n_classes):
    """Mean instance size per class over the whole evaluation set (NaN without instances)"""
    totals = np.zeros(n_classes, dtype=np.float64)
    counts = np.zeros(n_classes, dtype=np.int64)
    for gt, inst in zip(gts, insts):
        for _, n, size in inst.instances(gt):
            if n < n_classes:
                totals[n] += size
                counts[n] += 1
    out = np.full(n_classes, np.nan)
    np.divide(totals, counts, out=out, where=counts > 0)
    return out


def _instance_counts(pred, gt, inst, avg_sizes, n_classes):
    p, g = _values(pred), _values(gt)
    itp = np.zeros(n_classes)
    ifn = np.zeros(n_classes)
    fp = np.zeros(n_classes)
    has = np.zeros(n_classes, dtype=bool)
    scored = g != IGNORE
    ids = np.asarray(inst.values)
    for k, n, size in inst.instances(gt):
        if n >= n_classes:
            continue
        if size == 0 or not avg_sizes[n] > 0:
            raise FormatError(f"Instance {k} of class {n} has zero size", 0)
        weight = avg_sizes[n] / size
        inside = ids == k
        hit = int((p[inside] == n).sum())
        itp[n] += weight * hit
        ifn[n] += weight * (size - hit)
        has[n] = True
    for n in range(n_classes):
        fp[n] = int(((p == n) & (g != n) & scored).sum())
        # class pixels outside any instance count with weight 1
        loose = (g == n) & (ids == 0)
        hit = int((p[loose] == n).sum())
        itp[n] += hit
        ifn[n] += int(loose.sum()) - hit
    return itp, ifn, fp, has


def iiou(preds, gts, insts, avg_sizes, n_classes=None):
    """iTP / (iTP + FP + iFN) in percent, averaged over classes that have instances

    Accepts single maps or parallel lists. iTP / iFN pixels are weighted by
    (class average instance size) / (instance size); FP is unweighted.
    """
    if isinstance(insts, InstanceMap):
        preds, gts, insts = [preds], [gts], [insts]
    avg_sizes = np.asarray(avg_sizes, dtype=np.float64)
    n_classes = n_classes or len(avg_sizes)
    itp = np.zeros(n_classes)
    ifn = np.zeros(n_classes)
    fp = np.zeros(n_classes)
    has = np.zeros(n_classes, dtype=bool)
    for pred, gt, inst in zip(preds, gts, insts):
        a, b, c, d = _instance_counts(pred, gt, inst, avg_sizes, n_classes)
        itp += a
        ifn += b
        fp += c
        has |= d
    if not has.any():
        raise UndefinedMetricError("iIoU is undefined: no GT instances")
    scores = itp[has] / (itp[has] + fp[has] + ifn[has])
    return 100.0 * float(scores.mean())


# Boundary mIoU

def gt_boundary_sites(gt):
    """Pixels with a 4-neighbour of a different GT value"""
    g = _values(gt)
    sites = np.zeros(g.shape, dtype=bool)
    vertical = g[1:, :] != g[:-1, :]
    horizontal = g[:, 1:] != g[:, :-1]
    sites[1:, :] |= vertical
    sites[:-1, :] |= vertical
    sites[:, 1:] |= horizontal
    sites[:, :-1] |= horizontal
    return sites


def boundary_mask(gt, radius):
    """Pixels within `radius` (Euclidean) of a GT class boundary"""
    if not radius >= 1:
        raise ArgumentError(f"Boundary radius must be at least 1, got {radius}")
    sites = gt_boundary_sites(gt)
    if not sites.any():
        return np.zeros(sites.shape, dtype=bool)
    sq = squared_edt(sites)
    return (sq >= 0) & (sq <= float(radius) ** 2)


def _infer_classes(preds, gts):
    highest = 0
    for pred, gt in zip(preds, gts):
        p, g = _values(pred), _values(gt)
        highest = max(highest, int(p[p != IGNORE].max(initial=0)), int(g[g != IGNORE].max(initial=0)))
    return highest + 1


def boundary_confusion(preds, gts, radius, n_classes):
    """Confusion matrix restricted to boundary bands; accumulates over images"""
    cm = ConfusionMatrix(n_classes)
    for pred, gt in zip(preds, gts):
        cm.update(pred, gt, mask=boundary_mask(gt, radius))
    return cm


def boundary_miou(pred, gt, radius, n_classes=None):
    """mIoU over pixels whose distance to the nearest GT boundary is <= radius"""
    if isinstance(gt, (list, tuple)):
        preds, gts = pred, gt
    else:
        preds, gts = [pred], [gt]
    if n_classes is None:
        n_classes = _infer_classes(preds, gts)
    cm = boundary_confusion(preds, gts, radius, n_classes)
    if cm.total == 0:
        raise UndefinedMetricError(f"Boundary mIoU at radius {radius} has an empty mask")
    return miou(cm)[0]


# Feature-space diagnostics

@dataclass
class FeatureDiagnostics:
    A: float
    U: float
    U_l: dict = field(default_factory=dict)
    centroids: np.ndarray = None
    present: np.ndarray = None


def _class_groups(features, labels, n_classes):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    return [features[labels == n] for n in range(n_classes)]


def alignment(class_features):
    """Mean over non-empty classes of (1/|V|^2) sum_{j,k} |v_j - v_k|"""
    terms = []
    for group in class_features:
        group = np.asarray(group, dtype=np.float64)
        if len(group) == 0:
            continue
        # pdist lists each unordered pair once
        terms.append(2.0 * pdist(group).sum() / len(group) ** 2 if len(group) > 1 else 0.0)
    if not terms:
        raise UndefinedMetricError("Alignment is undefined: every class is empty")
    return float(np.mean(terms))


def class_centroids(features, labels, n_classes):
    """(N, d) plain class means and the mask of classes present"""
    groups = _class_groups(features, labels, n_classes)
    dim = np.asarray(features).shape[-1]
    mu = np.zeros((n_classes, dim))
    present = np.array([len(g) > 0 for g in groups])
    for n, g in enumerate(groups):
        if len(g):
            mu[n] = g.mean(axis=0)
    return mu, present


def uniformity(centroids):
    centroids = np.asarray(centroids, dtype=np.float64)
    if len(centroids) < 2:
        raise ArgumentError("Uniformity needs at least two centroids")
    return float(pdist(centroids).mean())


def neighborhood_uniformity(centroids, l):
    """(1/(N l)) sum_i of the l smallest distances from centroid i to the others"""
    centroids = np.asarray(centroids, dtype=np.float64)
    n = len(centroids)
    if n < 2:
        raise ArgumentError("Neighborhood uniformity needs at least two centroids")
    if not 1 <= l <= n - 1:
        raise ArgumentError(f"l must lie in [1, {n - 1}], got {l}")
    dist = squareform(pdist(centroids))
    np.fill_diagonal(dist, np.inf)
    nearest = np.sort(dist, axis=1)[:, :l]
    return float(nearest.sum() / (n * l))


def feature_diagnostics(features, labels, n_classes, ls=(3, 5)):
    """A, U and U_l over raw features; each l is clamped to (#present classes - 1)"""
    groups = _class_groups(features, labels, n_classes)
    mu, present = class_centroids(features, labels, n_classes)
    centroids = mu[present]
    result = FeatureDiagnostics(A=alignment(groups), U=uniformity(centroids),
                                centroids=mu, present=present)
    for l in ls:
        used = min(l, len(centroids) - 1)
        if used != l:
            logger.debug(f"U_{l} clamped to l = {used} for {len(centroids)} centroids")
        result.U_l[l] = neighborhood_uniformity(centroids, used)
    return result


# Cosine similarity against distance from the error boundary

@dataclass
class ProfileRow:
    layer: int
    bin_lo: float
    bin_hi: float
    count: int
    mean_cos: float


def cos_vs_distance_profile(sets, anchors, distance_maps, edges=PROFILE_EDGES):
    """Mean cosine(error pixel, GT-class anchor) per distance bin and layer

    `anchors[i]` is the (fused) anchor set of layer i and `distance_maps[i]`
    maps (image, class) to that class's DistanceMap on layer i. The last bin
    collects every distance >= edges[-1].
    """
    edges = np.asarray(edges, dtype=np.float64)
    n_bins = len(edges)
    rows = []
    for embedding_set, anchor_set, maps in zip(sets, anchors, distance_maps):
        sums = np.zeros(n_bins)
        counts = np.zeros(n_bins, dtype=np.int64)
        vectors = np.asarray(embedding_set.vectors, dtype=np.float64)
        for (image, n), dist in sorted(maps.items()):
            if not anchor_set.valid[n]:
                continue
            sel = np.flatnonzero(embedding_set.usable & (embedding_set.image == image)
                                 & (embedding_set.gt == n) & (embedding_set.pred != n))
            if sel.size == 0:
                continue
            px = embedding_set.pixels[sel]
            d = dist.values[px[:, 0], px[:, 1]].astype(np.float64)
            v = vectors[sel]
            anchor = anchor_set.anchors[n]
            cos = (v @ anchor) / (np.linalg.norm(v, axis=1) * np.linalg.norm(anchor))
            bins = np.clip(np.searchsorted(edges, d, side='right') - 1, 0, n_bins - 1)
            np.add.at(sums, bins, cos)
            np.add.at(counts, bins, 1)
        for k in range(n_bins):
            hi = float(edges[k + 1]) if k + 1 < n_bins else math.inf
            mean = float(sums[k] / counts[k]) if counts[k] else math.nan
            rows.append(ProfileRow(embedding_set.layer, float(edges[k]), hi, int(counts[k]), mean))
    return rows


def boundary_vs_interior(rows, interior_from=3.0):
    """Per layer: mean cosine of the first distance bin and of every bin from `interior_from` on

    Means are count-weighted; a side with no pixels is None.
    """
    out = {}
    for layer in sorted({r.layer for r in rows}):
        mine = [r for r in rows if r.layer == layer and r.count]
        first = min((r.bin_lo for r in rows if r.layer == layer), default=0.0)
        sides = {'boundary': [r for r in mine if r.bin_lo == first],
                 'interior': [r for r in mine if r.bin_lo >= interior_from]}
        out[layer] = {
            name: (sum(r.mean_cos * r.count for r in part) / sum(r.count for r in part)) if part else None
            for name, part in sides.items()
        }
    return out


def profile_to_frame(rows):
    return pd.DataFrame([r.__dict__ for r in rows], columns=PROFILE_COLUMNS)


def write_profile_csv(path, rows):
    frame = profile_to_frame(rows)
    frame.to_csv(path, index=False)
    return frame
