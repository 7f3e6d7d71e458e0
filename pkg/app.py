import argparse
import logging
import os
import sys
from typing import List, Optional

from errors import VALIDATION_ERRORS, UsageError
from pipeline import AXIS_NAMES, ExperimentRunner
from recon_logger import recon_logger
from settings import DEFAULT_CONFIG_PATH, load_experiment_config

EXIT_OK = 0
EXIT_COMPUTE = 1
EXIT_USAGE = 2


def _int_list(text: str) -> List[int]:
    try:
        values = [int(x) for x in text.split(',') if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one value")
    return values


def _str_list(text: str) -> List[str]:
    return [x.strip().lower() for x in text.split(',') if x.strip()]


def _axis(text: str) -> int:
    if text in AXIS_NAMES:
        return AXIS_NAMES.index(text)
    if text in ('0', '1', '2'):
        return int(text)
    raise argparse.ArgumentTypeError(f"axis must be x, y, z or 0-2, got '{text}'")


def cmd_simulate(args, runner: ExperimentRunner) -> int:
    out = args.out or os.path.join(runner.config.output_dir, 'scan')
    paths = runner.simulate(out, noise_fraction=args.noise)
    print(f"truth={paths.truth} clean={paths.clean} noisy={paths.noisy}")
    return EXIT_OK


def cmd_reconstruct(args, runner: ExperimentRunner) -> int:
    out = args.out or os.path.join(runner.config.output_dir, args.method)
    artifacts = runner.reconstruct(args.projections, args.method, out, truth_path=args.truth)
    print(f"volume={artifacts.volume}" + (f" checkpoint={artifacts.checkpoint}" if artifacts.checkpoint else ""))
    return EXIT_OK


def cmd_evaluate(args, runner: ExperimentRunner) -> int:
    out = args.out or os.path.join(runner.config.output_dir, 'eval')
    report = runner.evaluate(args.recon, args.truth, out, resample=args.resample)
    print(report.summary_line())
    return EXIT_OK


def cmd_sweep_views(args, runner: ExperimentRunner) -> int:
    out = args.out or os.path.join(runner.config.output_dir, 'sweep')
    rows = runner.sweep_views(out, view_counts=args.views, methods=args.methods, parallel=args.parallel or None)
    failed = sum(1 for r in rows if r['status'] != 'ok')
    print(f"sweep={os.path.join(out, 'sweep.csv')} rows={len(rows)} failed={failed}")
    return EXIT_OK


def cmd_export_slices(args, runner: ExperimentRunner) -> int:
    paths = runner.export_slices(args.volume, args.axis, args.out)
    print(f"slices={len(paths)} dir={args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='naf', description="Sparse-view cone-beam CT with neural attenuation fields")
    parser.add_argument('--config', default=DEFAULT_CONFIG_PATH, help="experiment YAML (default: config.yaml)")
    parser.add_argument('--seed', type=int, default=None, help="override the experiment seed")
    parser.add_argument('--strict', action='store_true', default=None,
                        help="bitwise-deterministic mode (single training worker)")
    parser.add_argument('--threads', type=int, default=None, help="worker threads for projector, trainer and FDK")
    parser.add_argument('--log-file', default=None, help="also log to this file (rotated daily)")
    parser.add_argument('--verbose', action='store_true', help="debug logging")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('simulate', help="phantom -> truth volume + clean/noisy projections")
    p.add_argument('--out', default=None)
    p.add_argument('--noise', type=float, default=None, help="noise fraction (overrides noise.fraction)")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser('reconstruct', help="projections -> volume with one method")
    p.add_argument('projections')
    p.add_argument('--method', required=True, help="naf | naf-frequency | fdk | sart")
    p.add_argument('--truth', default=None, help="ground truth for the PSNR column of the training trace")
    p.add_argument('--out', default=None)
    p.set_defaults(handler=cmd_reconstruct)

    p = sub.add_parser('evaluate', help="PSNR/SSIM report of a reconstruction against ground truth")
    p.add_argument('recon')
    p.add_argument('truth')
    p.add_argument('--out', default=None)
    p.add_argument('--resample', action='store_true', help="resample the reconstruction onto the truth grid")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser('sweep-views', help="simulate + reconstruct + evaluate over view counts and methods")
    p.add_argument('--views', type=_int_list, default=None, help="e.g. 10,25,50")
    p.add_argument('--methods', type=_str_list, default=None, help="e.g. naf,sart,fdk")
    p.add_argument('--parallel', action='store_true', help="run sweep cells concurrently")
    p.add_argument('--out', default=None)
    p.set_defaults(handler=cmd_sweep_views)

    p = sub.add_parser('export-slices', help="volume -> one 8-bit PGM per slice")
    p.add_argument('volume')
    p.add_argument('--axis', type=_axis, default=2, help="x, y or z (default z)")
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_export_slices)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    recon_logger.set_level(logging.DEBUG if args.verbose else logging.INFO)
    if args.log_file:
        recon_logger.attach_file(args.log_file)

    try:
        if args.threads is not None and args.threads < 1:
            raise UsageError(f"--threads must be >= 1, got {args.threads}")
        config = load_experiment_config(args.config).with_overrides(
            seed=args.seed, strict=args.strict, threads=args.threads)
        return args.handler(args, ExperimentRunner(config))
    except VALIDATION_ERRORS as e:
        logging.error(f"{args.command}: {e}")
        return EXIT_USAGE
    except Exception as e:
        recon_logger.log_failure(args.command, e)
        return EXIT_COMPUTE
    finally:
        recon_logger.detach_file()


if __name__ == '__main__':
    sys.exit(main())
