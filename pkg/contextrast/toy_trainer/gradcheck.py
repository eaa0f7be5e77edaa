"""
End-to-End Gradient Check
Central finite differences of the training objective against the analytic backward pass
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import NumericError
from ..losses import pixel_anchor_loss
from .encoder import ReferenceEncoder
from .rng import CounterRNG, GRADCHECK, PARAMETER_INIT, stream_id
from .trainer import Trainer

logger = logging.getLogger(__name__)

STEP = 1e-6
# Magnitude below which a gradient entry is compared absolutely
FLOOR = 1e-5


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR)


@dataclass
class GradCheckReport:
    mode: str
    tolerance: float
    checked: int = 0
    max_rel_error: float = 0.0
    worst: str = ''
    entries: list = field(default_factory=list)

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance

    def add(self, label, analytic, numeric):
        err = relative_error(analytic, numeric)
        self.entries.append({'entry': label, 'analytic': float(analytic), 'numeric': float(numeric),
                             'rel_error': float(err)})
        self.checked += 1
        if err > self.max_rel_error:
            self.max_rel_error = float(err)
            self.worst = label

    def to_json(self):
        return {'mode': self.mode, 'tolerance': self.tolerance, 'checked': self.checked,
                'max_rel_error': self.max_rel_error, 'worst': self.worst, 'passed': self.passed}

    def raise_for_failure(self):
        if not self.passed:
            raise NumericError(
                f"Gradient check failed: max relative error {self.max_rel_error:.3e} at {self.worst} "
                f"exceeds {self.tolerance:.1e}")
        return self


def _pick_entries(rng, params, extra):
    """One random coordinate per tensor, then `extra` more anywhere"""
    names = list(params)
    picks = [(name, rng.integers(0, params[name].size)) for name in names]
    for _ in range(extra):
        name = names[rng.integers(0, len(names))]
        picks.append((name, rng.integers(0, params[name].size)))
    return picks


def grad_check(config, tolerance=1e-3, extra_params=12, n_embeddings=16, encoder=None, image_size=8):
    """Compare analytic and central-difference gradients on a tiny float64 instance

    Predictions, BANE selections and sample pools are frozen at the
    unperturbed point, so the checked function is smooth in the parameters.
    """
    tiny = config.model_copy(update={'image_size': image_size, 'batch_size': 2})
    if encoder is None:
        encoder = ReferenceEncoder.seeded(tiny.seed, stream_id(PARAMETER_INIT), 4,
                                          tiny.contrast.embed_dim, dtype=np.float64)
    else:
        encoder = encoder.astype(np.float64)
    trainer = Trainer(tiny, encoder=encoder)
    samples = trainer.samples(0)
    images = np.stack([s.image for s in samples]).astype(np.float64)
    labels = [s.labels for s in samples]

    forward = encoder.forward(images)
    plan = trainer.plan(0, forward, labels)
    objective = trainer.objective(forward, plan)
    grads = encoder.backward(objective.grad_logits, objective.grad_embeddings)

    def loss_at(params):
        shifted = ReferenceEncoder(params, encoder.n_classes, encoder.embed_dim)
        return trainer.objective(shifted.forward(images), plan).total

    report = GradCheckReport(tiny.mode, tolerance)
    rng = CounterRNG(tiny.seed, stream_id(GRADCHECK))
    params = {k: v.copy() for k, v in encoder.params.items()}
    for name, index in _pick_entries(rng, params, extra_params):
        original = params[name].flat[index]
        params[name].flat[index] = original + STEP
        plus = loss_at(params)
        params[name].flat[index] = original - STEP
        minus = loss_at(params)
        params[name].flat[index] = original
        report.add(f"{name}[{index}]", grads[name].flat[index], (plus - minus) / (2 * STEP))

    if objective.pa is not None:
        alpha = tiny.contrast.alpha
        sets = objective.sets
        for _ in range(n_embeddings):
            layer = rng.integers(0, len(sets))
            row = rng.integers(0, len(sets[layer]))
            col = rng.integers(0, sets[layer].dim)
            values = []
            for sign in (1.0, -1.0):
                vectors = np.array(sets[layer].vectors, dtype=np.float64)
                vectors[row, col] += sign * STEP
                shifted = list(sets)
                shifted[layer] = sets[layer].with_vectors(vectors)
                values.append(alpha * pixel_anchor_loss(shifted, plan.pools, tiny.contrast, 4).loss)
            analytic = alpha * objective.pa.grad_vectors[layer][row, col]
            report.add(f"embedding{layer + 1}[{row},{col}]", analytic, (values[0] - values[1]) / (2 * STEP))

    logger.info(f"Gradient check ({tiny.mode}): {report.checked} entries, "
                f"max relative error {report.max_rel_error:.3e}")
    return report
