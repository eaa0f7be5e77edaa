"""
Test helpers and brute-force oracles
"""
import numpy as np


def unit_rows(rng, count, dim):
    """Random unit vectors, float64"""
    x = rng.normal(size=(count, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def brute_force_edges(mask):
    """Error pixels with a non-error 4-neighbour or on the border"""
    h, w = mask.shape
    out = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w) or not mask[rr, cc]:
                    out.append((r, c))
                    break
    return out


def brute_force_distances(mask, edges):
    h, w = mask.shape
    out = np.full((h, w), np.inf)
    for r in range(h):
        for c in range(w):
            if mask[r, c]:
                out[r, c] = min(np.sqrt((r - er) ** 2 + (c - ec) ** 2) for er, ec in edges)
    return out


def brute_force_confusion(pred, gt, n_classes, mask=None):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    h, w = gt.shape
    for r in range(h):
        for c in range(w):
            if gt[r, c] == 255 or (mask is not None and not mask[r, c]):
                continue
            cm[gt[r, c], pred[r, c]] += 1
    return cm
