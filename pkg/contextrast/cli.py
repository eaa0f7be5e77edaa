"""
Contextrast Command Line
train / eval / dt / profile / gradcheck / report
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import settings
from .bane_sampling import BinaryErrorMap, distance_transform, extract_edges
from .config import TrainConfig, build_train_config, flat_config, load_run_config
from .exceptions import ArgumentError, ContextrastError, FormatError, NumericError
from .feature_store import FeatureGrid, LabelMap
from .formats import dumps_json, read_checkpoint, read_pgm, write_ctxf, write_json, write_pgm
from .metrics import write_profile_csv
from .report import build_report
from .toy_trainer import ReferenceEncoder, evaluate, grad_check, profile, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path, mode=None, seed=None, iterations=None):
    config = load_run_config(path) if path else TrainConfig()
    overrides = {}
    if mode:
        overrides['mode'] = mode
    if seed is not None:
        overrides['seed'] = seed
    if iterations is not None:
        overrides['total_iterations'] = iterations
    if not overrides:
        return config
    return build_train_config({**flat_config(config), **overrides})


def _load_encoder(path):
    params, manifest = read_checkpoint(path)
    try:
        encoder = ReferenceEncoder.from_checkpoint(params)
    except (KeyError, ArgumentError) as e:
        raise FormatError(f"Checkpoint tensors do not describe the reference encoder: {e}", 0) from e
    config = build_train_config(manifest.get('config') or {})
    return encoder, config


def _radius(text):
    value = float(text)
    return int(value) if value.is_integer() else value


def _emit(payload, out=None):
    if out:
        write_json(out, payload)
    print(dumps_json(payload), end='')


def _train_command(args):
    config = _load_config(args.config, args.mode, args.seed, args.iterations)
    result = train(config, args.out)
    print("=" * 70)
    print(f"Run finished: {config.mode}, seed {config.seed}")
    print(f"  mIoU: {result.metrics['miou']:.2f}")
    print(f"  l_ce: {result.last.l_ce:.4f}  l_pa: {result.last.l_pa:.4f}")
    print(f"  Artefacts: {result.out_dir}")
    print("=" * 70)
    return EXIT_OK


def _eval_command(args):
    encoder, config = _load_encoder(args.checkpoint)
    metrics = evaluate(encoder, config, samples=args.samples, radii=tuple(args.radius), seed=args.seed)
    _emit(metrics, args.out)
    return EXIT_OK


def _dt_command(args):
    mask = read_pgm(args.mask).values != 0
    emap = BinaryErrorMap(class_id=1, layer=0, mask=mask)
    edges = extract_edges(emap)
    if len(edges) == 0:
        raise ArgumentError(f"{args.mask} has no error pixels, so no edges to measure from")
    dist = distance_transform(emap, edges)
    write_ctxf(args.out, FeatureGrid(0, dist.values[..., None]))
    if args.viz:
        finite = dist.values[mask]
        top = float(finite.max()) or 1.0
        viz = np.zeros(mask.shape, dtype=np.uint8)
        viz[mask] = (1 + np.round(254.0 * finite / top)).astype(np.uint8)
        write_pgm(args.viz, LabelMap(viz))
    logger.info(f"Distance map of {int(mask.sum())} error pixels ({len(edges)} edges) written to {args.out}")
    return EXIT_OK


def _profile_command(args):
    encoder, config = _load_encoder(args.checkpoint)
    rows = profile(encoder, config, samples=args.samples, seed=args.seed)
    frame = write_profile_csv(args.out, rows)
    logger.info(f"Profile with {len(frame)} rows written to {args.out}")
    return EXIT_OK


def _gradcheck_command(args):
    config = _load_config(args.config, args.mode, args.seed)
    report = grad_check(config, tolerance=args.tolerance)
    _emit(report.to_json())
    report.raise_for_failure()
    return EXIT_OK


def _report_command(args):
    _emit(build_report(args.runs), args.out)
    return EXIT_OK


def build_parser():
    parser = ArgumentParser(prog='contextrast', description="Contextual contrastive segmentation toolkit")
    subparsers = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)
    modes = ('ce_only', 'ce_pa', 'ce_pa_bane')

    p = subparsers.add_parser('train', help="Train the reference encoder on the shapes dataset")
    p.add_argument('--config', type=Path, default=None, help="key=value run config (defaults if omitted)")
    p.add_argument('--mode', choices=modes, default=None, help="Loss mode, overrides the config")
    p.add_argument('--out', type=Path, required=True, help="Output directory for checkpoint, log and metrics")
    p.add_argument('--seed', type=int, default=None, help="Run seed, overrides the config")
    p.add_argument('--iterations', type=int, default=None, help="total_iterations override")
    p.set_defaults(func=_train_command)

    p = subparsers.add_parser('eval', help="Evaluate a checkpoint on held-out shapes")
    p.add_argument('--checkpoint', type=Path, required=True, help="Run directory or checkpoint.ctxf")
    p.add_argument('--samples', type=int, default=None, help="Number of evaluation samples")
    p.add_argument('--radius', type=_radius, nargs='+', default=list(settings.DEFAULT_RADII),
                   help="Boundary radii in pixels")
    p.add_argument('--seed', type=int, default=None, help="Evaluation data seed")
    p.add_argument('--out', type=Path, default=None, help="Also write the metrics JSON here")
    p.set_defaults(func=_eval_command)

    p = subparsers.add_parser('dt', help="Distance from each mask pixel to the mask's edge")
    p.add_argument('--mask', type=Path, required=True, help="Binary PGM mask (nonzero = error)")
    p.add_argument('--out', type=Path, required=True, help="CTXF output (d = 1, +inf outside the mask)")
    p.add_argument('--viz', type=Path, default=None, help="Optional PGM rendering of the distances")
    p.set_defaults(func=_dt_command)

    p = subparsers.add_parser('profile', help="Cosine similarity vs. error-edge distance table")
    p.add_argument('--checkpoint', type=Path, required=True, help="Run directory or checkpoint.ctxf")
    p.add_argument('--out', type=Path, required=True, help="CSV output")
    p.add_argument('--samples', type=int, default=None, help="Number of evaluation samples")
    p.add_argument('--seed', type=int, default=None, help="Evaluation data seed")
    p.set_defaults(func=_profile_command)

    p = subparsers.add_parser('gradcheck', help="Finite-difference check of the training gradients")
    p.add_argument('--config', type=Path, default=None, help="key=value run config (defaults if omitted)")
    p.add_argument('--mode', choices=modes, default=None, help="Loss mode, overrides the config")
    p.add_argument('--seed', type=int, default=None, help="Seed, overrides the config")
    p.add_argument('--tolerance', type=float, default=1e-3, help="Maximum relative error")
    p.set_defaults(func=_gradcheck_command)

    p = subparsers.add_parser('report', help="Aggregate metrics.json of several runs by mode")
    p.add_argument('--runs', type=Path, nargs='+', required=True, help="Run directories or metrics files")
    p.add_argument('--out', type=Path, default=None, help="Also write the summary JSON here")
    p.set_defaults(func=_report_command)
    return parser


def main(argv=None):
    settings.configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        logger.error(f"Numeric failure: {str(e)}")
        return EXIT_NUMERIC
    except ContextrastError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
