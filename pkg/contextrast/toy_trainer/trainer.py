"""
Contextrast Training Loop
SGD with momentum and polynomial decay over CE, CE + PA and CE + PA + BANE objectives
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import settings
from ..bane_sampling import build_negative_pools, select_batch
from ..config import flat_config
from ..exceptions import ArgumentError, NumericError, UndefinedMetricError
from ..feature_store import (IGNORE, EmbeddingSet, FeatureGrid, LabelMap, LayerGeometry, downsample_labels,
                             flatten)
from ..formats import dumps_json, write_checkpoint, write_json
from ..losses import (LayerPools, LossReport, cross_entropy, pixel_anchor_loss, sample_positives,
                      sample_random_negatives)
from ..anchors import compute_anchors, fuse_layers
from ..metrics import (ConfusionMatrix, InstanceMap, average_instance_sizes, boundary_confusion,
                       boundary_vs_interior, cos_vs_distance_profile, feature_diagnostics, iiou, miou)
from ..serializers import MetricsSchema, TrainLogRecord
from .dataset import N_CLASSES, ShapesDataset
from .encoder import N_LAYERS, ReferenceEncoder
from .rng import CounterRNG, NEGATIVES, PARAMETER_INIT, POSITIVES, stream_id

logger = logging.getLogger(__name__)

LOG_FILE = 'train_log.jsonl'
METRICS_FILE = 'metrics.json'
DIAGNOSTICS_FILE = 'diagnostics.json'


def lr_at(iteration, total, base, power=0.9):
    """base * (1 - iteration / total) ** power"""
    if total <= 0 or not 0 <= iteration <= total:
        raise ArgumentError(f"Iteration {iteration} outside [0, {total}]")
    return base * (1.0 - iteration / total) ** power


@dataclass
class BatchPlan:
    """Sampling decisions of one iteration, fixed before the loss is evaluated"""
    labels: list
    preds: list
    layer_gts: list
    layer_preds: list
    selections: list = field(default_factory=list)
    pools: list = field(default_factory=list)
    err_px_per_class: list = field(default_factory=list)


@dataclass
class Objective:
    total: float
    l_ce: float
    grad_logits: np.ndarray
    pa: object
    sets: list
    grad_embeddings: list


@dataclass
class StepRecord:
    """Everything one iteration computed, for logging and instrumentation"""
    iteration: int
    lr: float
    report: LossReport
    plan: BatchPlan
    objective: Objective
    grads: dict

    def log_record(self):
        return TrainLogRecord(
            iter=self.iteration, lr=self.lr, l_ce=self.report.l_ce, l_pa=self.report.l_pa,
            total=self.report.total, err_px_per_class=self.plan.err_px_per_class,
            report=self.report.to_json(),
        ).model_dump()


@dataclass
class TrainResult:
    out_dir: Path
    metrics: dict
    last: LossReport


def layer_embedding_set(layer, vectors, flagged, gts, preds):
    """Batch of (B, h, w, d) embeddings -> one EmbeddingSet, image ids = batch order"""
    return EmbeddingSet.concat([
        flatten(FeatureGrid(layer, v, f), gt, pr, image=b)
        for b, (v, f, gt, pr) in enumerate(zip(vectors, flagged, gts, preds))
    ])


def error_pixels_per_class(preds, labels, n_classes):
    counts = np.zeros(n_classes, dtype=np.int64)
    for pred, gt in zip(preds, labels):
        wrong = (gt.values != pred.values) & (gt.values != IGNORE)
        counts += np.bincount(gt.values[wrong], minlength=n_classes)[:n_classes]
    return counts.tolist()


class Trainer:
    """Owns the encoder, the momentum buffers and the data stream of one run"""

    def __init__(self, config, encoder=None, dataset=None):
        self.config = config
        self.contrast = config.contrast
        self.n_classes = N_CLASSES
        self.dataset = dataset or ShapesDataset(config.seed, config.image_size, config.noise_sigma)
        self.encoder = encoder or ReferenceEncoder.seeded(
            config.seed, stream_id(PARAMETER_INIT), self.n_classes, self.contrast.embed_dim)
        self.geometry = LayerGeometry.for_image(config.image_size, config.image_size, N_LAYERS)
        self.velocity = {k: np.zeros_like(v) for k, v in self.encoder.params.items()}

    @property
    def uses_pa(self):
        return self.config.mode != 'ce_only'

    def samples(self, iteration):
        return self.dataset.batch(iteration * self.config.batch_size, self.config.batch_size)

    def plan(self, iteration, forward, labels):
        """Per-layer labels, online predictions and the positive / negative pools"""
        preds = [LabelMap(p) for p in forward.predictions()]
        plan = BatchPlan(labels, preds, [], [],
                         err_px_per_class=error_pixels_per_class(preds, labels, self.n_classes))
        if not self.uses_pa:
            return plan
        c = self.contrast
        for layer in range(1, N_LAYERS + 1):
            size = self.geometry.layer_size(layer)
            gts = [downsample_labels(g, size) for g in labels]
            prs = [downsample_labels(p, size) for p in preds]
            plan.layer_gts.append(gts)
            plan.layer_preds.append(prs)
            emb = layer_embedding_set(layer, forward.embeddings[layer - 1], forward.flagged[layer - 1], gts, prs)
            selection = select_batch(emb, prs, gts, self.n_classes, c.bane_ratio)
            forced = [s.indices for s in selection.selections]
            pos_rng = CounterRNG(self.config.seed, stream_id(POSITIVES, layer, iteration))
            positives = sample_positives(emb, self.n_classes, c.positives_per_class, pos_rng, forced)
            if self.config.mode == 'ce_pa_bane':
                negatives = build_negative_pools(selection.selections, emb, self.n_classes, c.negative_cap)
            else:
                neg_rng = CounterRNG(self.config.seed, stream_id(NEGATIVES, layer, iteration))
                negatives = sample_random_negatives(emb, self.n_classes, c.negative_cap, neg_rng)
            plan.selections.append(selection)
            plan.pools.append(LayerPools(positives, negatives))
        return plan

    def objective(self, forward, plan):
        """L = L_CE + alpha * L_PA and its gradients w.r.t. logits and unit embeddings"""
        l_ce, grad_logits = cross_entropy(forward.logits, plan.labels)
        if not self.uses_pa:
            return Objective(l_ce, l_ce, grad_logits, None, [], None)
        sets = [layer_embedding_set(i, forward.embeddings[i - 1], forward.flagged[i - 1],
                                    plan.layer_gts[i - 1], plan.layer_preds[i - 1])
                for i in range(1, N_LAYERS + 1)]
        pa = pixel_anchor_loss(sets, plan.pools, self.contrast, self.n_classes)
        alpha = self.contrast.alpha
        grad_embeddings = []
        for s, g, emb in zip(sets, pa.grad_vectors, forward.embeddings):
            out = np.zeros(emb.shape, dtype=np.float64)
            out[s.image, s.pixels[:, 0], s.pixels[:, 1]] = alpha * g
            grad_embeddings.append(out)
        return Objective(l_ce + alpha * pa.loss, l_ce, grad_logits, pa, sets, grad_embeddings)

    def apply_update(self, grads, lr):
        wd = self.config.weight_decay
        for name, param in self.encoder.params.items():
            g = grads[name] + wd * param
            self.velocity[name] = (self.config.momentum * self.velocity[name] + g).astype(param.dtype)
            if lr:
                param -= np.asarray(lr * self.velocity[name], dtype=param.dtype)

    def step(self, iteration):
        samples = self.samples(iteration)
        images = np.stack([s.image for s in samples])
        labels = [s.labels for s in samples]
        forward = self.encoder.forward(images)
        plan = self.plan(iteration, forward, labels)
        objective = self.objective(forward, plan)
        report = LossReport.build(objective.l_ce, objective.pa, self.contrast.alpha if self.uses_pa else 0.0)
        lr = lr_at(iteration, self.config.total_iterations, self.config.base_lr, self.config.power)
        if not math.isfinite(report.total):
            return StepRecord(iteration, lr, report, plan, objective, {})
        grads = self.encoder.backward(objective.grad_logits, objective.grad_embeddings)
        self.apply_update(grads, lr)
        return StepRecord(iteration, lr, report, plan, objective, grads)


def _dump_diagnostics(out_dir, record, encoder):
    path = Path(out_dir) / DIAGNOSTICS_FILE
    write_json(path, {
        'iteration': record.iteration,
        'lr': record.lr,
        'l_ce': record.report.l_ce,
        'l_pa': record.report.l_pa,
        'l_pa_per_layer': record.report.l_pa_per_layer,
        'non_finite_params': [k for k, v in encoder.params.items() if not np.all(np.isfinite(v))],
        'err_px_per_class': record.plan.err_px_per_class,
    })
    return path


def train(config, out_dir, trainer=None):
    """Run the full schedule, then write checkpoint, log and final metrics"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = trainer or Trainer(config)
    logger.info(f"Training {config.mode} for {config.total_iterations} iterations, seed {config.seed}")
    last = None
    with open(out_dir / LOG_FILE, 'w', encoding='utf-8') as log:
        for iteration in range(config.total_iterations):
            record = trainer.step(iteration)
            if not math.isfinite(record.report.total):
                path = _dump_diagnostics(out_dir, record, trainer.encoder)
                logger.error(f"Non-finite loss at iteration {iteration}, diagnostics in {path}")
                raise NumericError(f"Non-finite loss at iteration {iteration}", dump_path=str(path))
            log.write(json.dumps(record.log_record(), sort_keys=True) + '\n')
            last = record.report
            if iteration % config.log_every == 0 or iteration == config.total_iterations - 1:
                logger.info(f"iter {iteration} lr {record.lr:.3e} l_ce {last.l_ce:.4f} "
                            f"l_pa {last.l_pa:.4f} err_px {record.plan.err_px_per_class}")

    write_checkpoint(out_dir, trainer.encoder.params, config=flat_config(config),
                     extra={'mode': config.mode, 'seed': config.seed})
    metrics = evaluate(trainer.encoder, config)
    trend = boundary_vs_interior(profile(trainer.encoder, config))
    metrics['cos_profile'] = {str(layer): sides for layer, sides in trend.items()}
    metrics.update({'mode': config.mode, 'seed': config.seed, 'l_ce': last.l_ce, 'l_pa': last.l_pa,
                    'l_pa_per_layer': last.l_pa_per_layer, 'total': last.total,
                    'loss_report': last.to_json()})
    write_json(out_dir / METRICS_FILE, metrics)
    return TrainResult(out_dir, metrics, last)


def _eval_pass(encoder, config, samples, seed):
    dataset = ShapesDataset(config.seed if seed is None else seed, config.image_size,
                            config.noise_sigma, split='eval')
    items = dataset.batch(0, samples or config.eval_samples)
    outputs = []
    for start in range(0, len(items), config.batch_size):
        chunk = items[start:start + config.batch_size]
        forward = encoder.forward(np.stack([s.image for s in chunk]))
        encoder.clear()
        outputs.append((chunk, forward))
    return items, outputs


def evaluate(encoder, config, samples=None, radii=settings.DEFAULT_RADII, seed=None, ls=(3, 5)):
    """mIoU, iIoU, boundary mIoU per radius and A / U / U_l on held-out samples"""
    items, outputs = _eval_pass(encoder, config, samples, seed)
    n = encoder.n_classes
    gts = [s.labels for s in items]
    insts = [InstanceMap(s.instances) for s in items]
    preds, features, feature_labels = [], [], []
    top_size = LayerGeometry.for_image(config.image_size, config.image_size, N_LAYERS).layer_size(N_LAYERS)
    for chunk, forward in outputs:
        preds.extend(LabelMap(p) for p in forward.predictions())
        for b, s in enumerate(chunk):
            small = downsample_labels(s.labels, top_size).values
            keep = small != IGNORE
            features.append(forward.features[-1][b][keep].astype(np.float64))
            feature_labels.append(small[keep])

    cm = ConfusionMatrix(n)
    for pred, gt in zip(preds, gts):
        cm.update(pred, gt)
    score, per_class = miou(cm)
    result = {
        'miou': score,
        'per_class_iou': per_class.tolist(),
        'pixel_accuracy': cm.pixel_accuracy(),
        'b_miou': {},
        'U_l': {},
    }
    try:
        result['iiou'] = iiou(preds, gts, insts, average_instance_sizes(gts, insts, n), n)
    except UndefinedMetricError:
        result['iiou'] = None
    for radius in radii:
        bcm = boundary_confusion(preds, gts, radius, n)
        result['b_miou'][str(radius)] = miou(bcm)[0] if bcm.total else None
    try:
        diag = feature_diagnostics(np.concatenate(features), np.concatenate(feature_labels), n, ls)
    except (ArgumentError, UndefinedMetricError) as e:
        logger.warning(f"Feature diagnostics skipped: {str(e)}")
        result.update({'A': None, 'U': None})
    else:
        result['A'] = diag.A
        result['U'] = diag.U
        result['U_l'] = {str(k): v for k, v in diag.U_l.items()}
    MetricsSchema.model_validate(json.loads(dumps_json(result)))
    return result


def profile(encoder, config, samples=None, seed=None):
    """Cosine similarity of error pixels to their GT anchor, binned by error-edge distance"""
    items, outputs = _eval_pass(encoder, config, samples, seed)
    n = encoder.n_classes
    geometry = LayerGeometry.for_image(config.image_size, config.image_size, N_LAYERS)
    labels = [s.labels for s in items]
    preds = [LabelMap(p) for _, forward in outputs for p in forward.predictions()]
    sets, maps = [], []
    for layer in range(1, N_LAYERS + 1):
        size = geometry.layer_size(layer)
        gts = [downsample_labels(g, size) for g in labels]
        prs = [downsample_labels(p, size) for p in preds]
        vectors = np.concatenate([f.embeddings[layer - 1] for _, f in outputs])
        flagged = np.concatenate([f.flagged[layer - 1] for _, f in outputs])
        emb = layer_embedding_set(layer, vectors, flagged, gts, prs)
        selection = select_batch(emb, prs, gts, n, config.contrast.bane_ratio, keep_maps=True)
        sets.append(emb)
        maps.append({key: dist for key, (_, dist) in selection.maps.items()})
    anchors = [compute_anchors(s, n) for s in sets]
    c = config.contrast
    fused, _ = fuse_layers(anchors, c.w_l, c.w_h, c.anchor_source, c.shared_layers)
    return cos_vs_distance_profile(sets, fused, maps)
