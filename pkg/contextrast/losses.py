"""
Contrastive Losses
InfoNCE, the pixel-anchor loss over encoder layers, pixel-wise cross-entropy
and the analytic gradients that feed the encoder's backward pass
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, logsumexp

from .anchors import anchor_backward, compute_anchors, fuse_layers, fusion_backward
from .config import ContrastConfig
from .exceptions import ArgumentError
from .feature_store import IGNORE, LabelMap
from .serializers import LossReportSchema

logger = logging.getLogger(__name__)

# Allowed deviation of |x| from 1 for inputs of info_nce
UNIT_TOLERANCE = 1e-5

__all__ = [
    'ContrastConfig', 'InfoNCEResult', 'LayerPools', 'LayerLossResult', 'PixelAnchorResult',
    'LossReport', 'info_nce', 'grad_pa_wrt_anchor', 'sample_positives', 'sample_random_negatives',
    'pixel_anchor_layer_loss', 'pixel_anchor_loss', 'cross_entropy', 'total_loss',
]


@dataclass
class InfoNCEResult:
    loss: float
    grad_v: np.ndarray
    grad_pos: np.ndarray
    grad_neg: np.ndarray
    p_pos: np.ndarray
    p_neg: np.ndarray


@dataclass
class LayerPools:
    """Indices into one layer's EmbeddingSet: positives and negatives per anchor class"""
    positives: list
    negatives: list


@dataclass
class LayerLossResult:
    loss: float
    grad_anchors: np.ndarray
    grad_vectors: np.ndarray
    n_valid: int
    skipped: int
    p_pos: dict = field(default_factory=dict)
    p_neg: dict = field(default_factory=dict)


@dataclass
class PixelAnchorResult:
    """L_PA with gradients chained through fusion and anchor means"""
    loss: float
    per_layer: list
    layers: list
    grad_vectors: list
    grad_anchors: list
    anchors: list
    fused: list


def _as_rows(x, dim):
    rows = np.asarray(x, dtype=np.float64)
    if rows.size == 0:
        return rows.reshape(0, dim)
    return rows.reshape(-1, dim)


def _matching(anchor, pos, neg, tau):
    """Per-positive losses, p_+ (P,) and the sum over positives of p_- (Q,)

    p_-[p, q] = exp(s_q - lse_p) factors into a negative and a positive term,
    so the (P, Q) matrix is never formed.
    """
    s_pos = pos @ anchor / tau
    s_neg = neg @ anchor / tau
    if len(s_neg) == 0:
        return np.zeros(len(s_pos)), np.ones(len(s_pos)), np.zeros(0)
    lse = np.logaddexp(s_pos, logsumexp(s_neg))
    top = s_neg.max()
    p_neg_sum = np.exp(s_neg - top) * np.exp(top - lse).sum()
    return lse - s_pos, np.exp(s_pos - lse), p_neg_sum


def _anchor_grad(pos, neg, p_pos, p_neg_sum, tau):
    # -1/(tau |V+|) sum_+ ((1 - p_+) v_+ - sum_- p_- v_-)
    return -((1.0 - p_pos) @ pos - p_neg_sum @ neg) / (tau * len(pos))


def _check_unit(name, rows):
    norms = np.linalg.norm(rows, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        raise ArgumentError(f"{name} must be unit vectors (max |norm - 1| = {np.abs(norms - 1.0).max():.3g})")


def info_nce(v, positives, negatives, tau):
    """Mean over positives of -log(exp(v.v+/tau) / (exp(v.v+/tau) + sum exp(v.v-/tau)))"""
    if tau <= 0:
        raise ArgumentError(f"Temperature must be positive, got {tau}")
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    d = v.shape[0]
    pos = _as_rows(positives, d)
    neg = _as_rows(negatives, d)
    if len(pos) == 0:
        raise ArgumentError("info_nce needs at least one positive")
    _check_unit('v', v[None])
    _check_unit('positives', pos)
    if len(neg):
        _check_unit('negatives', neg)
    losses, p_pos, p_neg_sum = _matching(v, pos, neg, tau)
    scale = 1.0 / (tau * len(pos))
    lse = losses + pos @ v / tau
    return InfoNCEResult(
        loss=float(losses.mean()),
        grad_v=_anchor_grad(pos, neg, p_pos, p_neg_sum, tau),
        grad_pos=(p_pos - 1.0)[:, None] * v[None, :] * scale,
        grad_neg=p_neg_sum[:, None] * v[None, :] * scale,
        p_pos=p_pos,
        p_neg=np.exp((neg @ v / tau)[None, :] - lse[:, None]),
    )


def grad_pa_wrt_anchor(anchor, positives, negatives, tau):
    """Closed-form dL_a/d(anchor) in float64 from the matching probabilities"""
    anchor = np.asarray(anchor, dtype=np.float64).reshape(-1)
    d = anchor.shape[0]
    pos = _as_rows(positives, d)
    neg = _as_rows(negatives, d)
    if len(pos) == 0:
        raise ArgumentError("Anchor gradient needs at least one positive")
    _, p_pos, p_neg = _matching(anchor, pos, neg, tau)
    return _anchor_grad(pos, neg, p_pos, p_neg, tau)


def sample_positives(embedding_set, n_classes, budget, rng, forced=None):
    """Up to `budget` usable GT-n entries per class; `forced[n]` entries come first"""
    usable = embedding_set.usable
    positives = []
    for n in range(n_classes):
        members = np.flatnonzero(usable & (embedding_set.gt == n))
        first = np.zeros(0, dtype=np.int64)
        if forced is not None and len(forced[n]):
            first = np.asarray(forced[n], dtype=np.int64)
            first = first[np.isin(first, members)]
            _, keep = np.unique(first, return_index=True)
            first = first[np.sort(keep)][:budget]
        rest = np.setdiff1d(members, first)
        room = budget - len(first)
        if len(rest) > room:
            rest = np.sort(rng.choice(rest, size=room, replace=False))
        positives.append(np.concatenate([first, rest]).astype(np.int64))
    return positives


def sample_random_negatives(embedding_set, n_classes, cap, rng):
    """Random usable entries of every other GT class, at most `cap` per anchor"""
    usable = embedding_set.usable
    pools = []
    for n in range(n_classes):
        others = np.flatnonzero(usable & (embedding_set.gt != n))
        if len(others) > cap:
            others = np.sort(rng.choice(others, size=cap, replace=False))
        pools.append(others.astype(np.int64))
    return pools


def pixel_anchor_layer_loss(fused, embedding_set, pools, tau):
    """L_a of one layer averaged over its classes with positives and a valid anchor

    `p_neg` holds, per class, the sum over positives of p_- for each negative.
    """
    vectors = np.asarray(embedding_set.vectors, dtype=np.float64)
    n_classes, d = fused.anchors.shape
    grad_anchors = np.zeros((n_classes, d), dtype=np.float64)
    # dL/dv is a multiple of the class anchor for every positive and negative
    coef = np.zeros((len(vectors), n_classes), dtype=np.float64)
    total = 0.0
    n_valid = 0
    skipped = 0
    p_pos, p_neg = {}, {}
    for n in range(n_classes):
        pos_idx = np.asarray(pools.positives[n], dtype=np.int64)
        if len(pos_idx) == 0:
            continue
        if not fused.valid[n]:
            skipped += 1
            logger.warning(f"Layer {fused.layer}: class {n} has positives but no valid anchor, skipped")
            continue
        neg_idx = np.asarray(pools.negatives[n], dtype=np.int64)
        pos, neg = vectors[pos_idx], vectors[neg_idx]
        losses, pp, pn = _matching(fused.anchors[n], pos, neg, tau)
        total += losses.mean()
        grad_anchors[n] = _anchor_grad(pos, neg, pp, pn, tau)
        scale = 1.0 / (tau * len(pos_idx))
        coef[:, n] = (np.bincount(pos_idx, weights=(pp - 1.0) * scale, minlength=len(vectors))
                      + np.bincount(neg_idx, weights=pn * scale, minlength=len(vectors)))
        p_pos[n], p_neg[n] = pp, pn
        n_valid += 1
    grad_vectors = coef @ fused.anchors
    if n_valid == 0:
        return LayerLossResult(0.0, grad_anchors, grad_vectors, 0, skipped, p_pos, p_neg)
    return LayerLossResult(total / n_valid, grad_anchors / n_valid, grad_vectors / n_valid,
                           n_valid, skipped, p_pos, p_neg)


def pixel_anchor_loss(sets, pools, config, n_classes):
    """L_PA = sum_i lambda_i L_a(layer i) with the full anchor gradient chain

    `sets` and `pools` are ordered by layer (index 0 = layer 1); the shared
    anchors come from the layer picked by `config.anchor_source` and reach the
    layers listed in `config.shared_layers`.
    """
    if len(sets) != len(pools) or len(sets) != len(config.lambdas):
        raise ArgumentError(
            f"Got {len(sets)} layers, {len(pools)} pools and {len(config.lambdas)} lambdas")
    anchors = [compute_anchors(s, n_classes) for s in sets]
    fused, shared = fuse_layers(anchors, config.w_l, config.w_h, config.anchor_source, config.shared_layers)

    layers = [pixel_anchor_layer_loss(f, s, p, config.tau) for f, s, p in zip(fused, sets, pools)]
    per_layer = [r.loss for r in layers]
    loss = float(sum(lam * r.loss for lam, r in zip(config.lambdas, layers)))

    grad_vectors = [lam * r.grad_vectors for lam, r in zip(config.lambdas, layers)]
    grad_fused = [lam * r.grad_anchors for lam, r in zip(config.lambdas, layers)]
    grad_means = [np.zeros_like(g) for g in grad_fused]
    for i, f in enumerate(fused):
        g_low, g_high = fusion_backward(f, grad_fused[i])
        grad_means[i] += g_low
        grad_means[shared] += g_high
    for i, (a, s) in enumerate(zip(anchors, sets)):
        grad_vectors[i] = grad_vectors[i] + anchor_backward(a, grad_means[i], s)
    return PixelAnchorResult(loss, per_layer, layers, grad_vectors, grad_fused, anchors, fused)


def _label_values(gt):
    if isinstance(gt, LabelMap):
        return gt.values
    if isinstance(gt, (list, tuple)):
        return np.stack([_label_values(g) for g in gt])
    return np.asarray(gt)


def cross_entropy(logits, gt):
    """Mean -log softmax(logits)[gt] over non-IGNORE pixels and its gradient"""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _label_values(gt).astype(np.int64)
    if logits.shape[:-1] != labels.shape:
        raise ArgumentError(f"Logits {logits.shape} do not match labels {labels.shape}")
    n_classes = logits.shape[-1]
    scored = labels != IGNORE
    count = int(scored.sum())
    grad = np.zeros_like(logits)
    if count == 0:
        logger.warning("Cross-entropy over a batch with every pixel IGNORE")
        return 0.0, grad
    if labels[scored].max() >= n_classes:
        raise ArgumentError(f"Label {labels[scored].max()} out of range for {n_classes} logits")
    logp = log_softmax(logits[scored], axis=-1)
    target = labels[scored]
    picked = logp[np.arange(count), target]
    probs = np.exp(logp)
    probs[np.arange(count), target] -= 1.0
    grad[scored] = probs / count
    return float(-picked.sum() / count), grad


def total_loss(ce, pa, alpha):
    return float(ce) + float(alpha) * float(pa)


@dataclass
class LossReport:
    """Losses of one iteration; total is l_ce + alpha * l_pa"""
    l_ce: float
    l_pa: float
    l_pa_per_layer: list
    total: float
    alpha: float
    grad_norm_embeddings: float = 0.0
    grad_norm_anchors: float = 0.0
    mean_p_pos: list = field(default_factory=list)
    mean_p_neg: list = field(default_factory=list)

    @classmethod
    def build(cls, l_ce, pa_result, alpha):
        """Report for CE alone when `pa_result` is None"""
        if pa_result is None:
            return cls(float(l_ce), 0.0, [], total_loss(l_ce, 0.0, alpha), float(alpha))
        grad_emb = float(np.sqrt(sum(np.sum(g * g) for g in pa_result.grad_vectors)))
        grad_anc = float(np.sqrt(sum(np.sum(g * g) for g in pa_result.grad_anchors)))
        p_pos, p_neg = [], []
        for layer in pa_result.layers:
            pp = [p for p in layer.p_pos.values()]
            p_pos.append(float(np.mean(np.concatenate(pp))) if pp else None)
            # mean over every (positive, negative) pair of the layer
            pairs = sum(len(layer.p_pos[n]) * len(s) for n, s in layer.p_neg.items())
            p_neg.append(float(sum(s.sum() for s in layer.p_neg.values()) / pairs) if pairs else None)
        return cls(float(l_ce), pa_result.loss, list(pa_result.per_layer),
                   total_loss(l_ce, pa_result.loss, alpha), float(alpha),
                   grad_emb, grad_anc, p_pos, p_neg)

    def to_json(self):
        return LossReportSchema(
            l_ce=self.l_ce, l_pa=self.l_pa, l_pa_per_layer=self.l_pa_per_layer, total=self.total,
            grad_norm_embeddings=self.grad_norm_embeddings, grad_norm_anchors=self.grad_norm_anchors,
        ).model_dump()
