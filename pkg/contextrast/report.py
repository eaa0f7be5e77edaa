"""
Run Report
Aggregate metrics.json files of several runs by loss mode and check the ablation directions
"""
import logging
from pathlib import Path

import pandas as pd

from .exceptions import ArgumentError
from .formats import read_json
from .serializers import MetricsSchema, validate_document

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.json'
SUMMARY_COLUMNS = ['miou', 'iiou', 'A', 'U']
PROFILE_LAYERS = (1, 2, 3, 4)
PROFILE_COLUMNS = [f'cos_{side}_l{layer}' for layer in PROFILE_LAYERS for side in ('boundary', 'interior')]
# layers that must show lower boundary than interior similarity
TREND_LAYERS = 3


def _metrics_path(path):
    path = Path(path)
    return path / METRICS_FILE if path.is_dir() else path


def load_runs(paths):
    """One row per run: mode, seed, the headline metrics and the cosine profile sides"""
    rows = []
    for path in paths:
        data = read_json(_metrics_path(path))
        validate_document(MetricsSchema, data)
        if 'mode' not in data:
            raise ArgumentError(f"{path} has no 'mode'; was it written by `train`?")
        row = {'run': str(path), 'mode': data['mode'], 'seed': data.get('seed'),
               **{k: data.get(k) for k in SUMMARY_COLUMNS}}
        profile = data.get('cos_profile', {})
        for layer in PROFILE_LAYERS:
            for side in ('boundary', 'interior'):
                row[f'cos_{side}_l{layer}'] = profile.get(str(layer), {}).get(side)
        rows.append(row)
    if not rows:
        raise ArgumentError("No runs given")
    return pd.DataFrame(rows)


def summarize(frame):
    """Per-mode means plus the directional checks between modes"""
    columns = SUMMARY_COLUMNS + [c for c in PROFILE_COLUMNS if c in frame]
    means = frame[columns].astype(float).assign(mode=frame['mode']).groupby('mode').mean()
    counts = frame.groupby('mode').size()
    summary = {
        'runs': {mode: int(n) for mode, n in counts.items()},
        'means': {mode: {k: _num(row[k]) for k in SUMMARY_COLUMNS} for mode, row in means.iterrows()},
        'checks': {},
    }

    def mean(mode, key):
        if mode not in means.index or key not in means.columns:
            return None
        return _num(means.loc[mode, key])

    checks = summary['checks']
    bane, pa, ce = (mean(m, 'miou') for m in ('ce_pa_bane', 'ce_pa', 'ce_only'))
    if None not in (bane, pa, ce):
        checks['miou_order'] = bool(bane > pa > ce)
    if None not in (bane, ce):
        checks['miou_gain_at_least_1'] = bool(bane - ce >= 1.0)
        a_bane, a_ce = mean('ce_pa_bane', 'A'), mean('ce_only', 'A')
        u_bane, u_ce = mean('ce_pa_bane', 'U'), mean('ce_only', 'U')
        if None not in (a_bane, a_ce, u_bane, u_ce):
            checks['alignment_tighter'] = bool(a_bane < a_ce)
            checks['uniformity_wider'] = bool(u_bane > u_ce)
    sides = [(mean('ce_pa_bane', f'cos_boundary_l{k}'), mean('ce_pa_bane', f'cos_interior_l{k}'))
             for k in PROFILE_LAYERS]
    sides = [(b, i) for b, i in sides if None not in (b, i)]
    if len(sides) >= TREND_LAYERS:
        summary['boundary_cosine'] = [{'boundary': b, 'interior': i} for b, i in sides]
        checks['boundary_cosine_lower'] = sum(b < i for b, i in sides) >= TREND_LAYERS
    for name, ok in checks.items():
        if not ok:
            logger.warning(f"Directional check {name} does not hold")
    return summary


def _num(value):
    return None if pd.isna(value) else float(value)


def build_report(paths):
    return summarize(load_runs(paths))
