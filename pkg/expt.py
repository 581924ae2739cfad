#!/usr/bin/env python3
"""
Command-line entry point for few-shot optimization by synthetic pretraining

Usage:
    # Pretrain on synthetic GP functions
    python expt.py pretrain --preset desk-micro [--seed S] [--set train.iterations=100]

    # Adapt a checkpoint to held-out tasks
    python expt.py adapt --config run.toml --checkpoint runs/.../expt-step500-abcd1234.expt \
        --task gp-matern52 --task gp-periodic [--mode sequential]

    # Gradient-ascent baselines need no checkpoint
    python expt.py adapt --config run.toml --method grad-mean --task ackley

    # Seeds × parameter values × tasks × methods, resumable
    python expt.py sweep --preset full-synthetic --set 'sweep.param="generator.kernel"' \
        --set 'sweep.values=["rbf","cosine"]'

    # Mean ± std table across seeds
    python expt.py report --metrics runs/run-abcd1234/metrics.csv
"""

import argparse
import sys
import traceback
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.config import load_config
from src.errors import ExptError
from src.evaluation import METHODS
from src.runner import MODEL_METHODS, ExperimentRunner

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Few-shot black-box optimization with a synthetically '
                                                 'pretrained in-context inverse model')
    subparsers = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='TOML config file (flat dotted keys)')
    common.add_argument('--preset', help='Preset under presets/ (full-synthetic, desk-micro, pool-pretrain)')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override one config key; VALUE is parsed as TOML (repeatable)')
    common.add_argument('--seed', type=int, help='Run seed (same as --set run.seed=S)')
    common.add_argument('--quiet', '-q', action='store_true', help='Suppress progress output')
    common.add_argument('--traceback', action='store_true', help='Print the full traceback on errors')

    subparsers.add_parser('pretrain', parents=[common], help='Pretrain models on synthetic functions')

    for name, help_text in (('adapt', 'Adapt checkpoints to tasks and score Q proposals'),
                            ('sequential', 'Adapt one design at a time, feeding each result back')):
        sub = subparsers.add_parser(name, parents=[common], help=help_text)
        sub.add_argument('--checkpoint', action='append', default=[],
                         help='Checkpoint file (repeatable, one per model kind)')
        sub.add_argument('--task', action='append', default=[],
                         help='Task name (repeatable; default: eval.tasks)')
        sub.add_argument('--method', action='append', default=[], choices=METHODS,
                         help='Adaptation method (repeatable; default: eval.methods)')
        sub.add_argument('--mode', choices=['simultaneous', 'sequential'],
                         default='sequential' if name == 'sequential' else None,
                         help='Propose all Q designs at once or one at a time')
        sub.add_argument('--metrics', help='Metrics CSV to append to (default: <run dir>/metrics.csv)')

    sweep = subparsers.add_parser('sweep', parents=[common], help='Run the seed / parameter cross-product')
    sweep.add_argument('--metrics', help='Metrics CSV to append to (default: <run dir>/metrics.csv)')
    sweep.add_argument('--force', action='store_true', help='Take over a ledger written by a different sweep')

    report = subparsers.add_parser('report', parents=[common], help='Aggregate a metrics CSV across seeds')
    report.add_argument('--metrics', help='Metrics CSV (default: <run dir>/metrics.csv)')
    report.add_argument('--force', action='store_true', help='Aggregate rows from different generator configs')
    report.add_argument('--output', help='Also write the aggregated table to this CSV')
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")

    if args.command in ('adapt', 'sequential') and not args.checkpoint:
        if any(m in MODEL_METHODS for m in args.method):
            parser.error(f"{args.command}: --checkpoint is required for methods {sorted(MODEL_METHODS)}")

    try:
        config = load_config(args.config, overrides, preset=args.preset)
        # without --method the methods come from the config
        if args.command in ('adapt', 'sequential') and not args.method and not args.checkpoint:
            if any(m in MODEL_METHODS for m in config['eval.methods']):
                parser.error(f"{args.command}: --checkpoint is required for methods {sorted(MODEL_METHODS)}")

        runner = ExperimentRunner(config, quiet=args.quiet, metrics_path=getattr(args, 'metrics', None))
        if args.command == 'pretrain':
            runner.run_pretrain()
        elif args.command in ('adapt', 'sequential'):
            runner.run_adapt(args.checkpoint, args.task or None, args.method or None, args.mode)
        elif args.command == 'sweep':
            runner.run_sweep(force=args.force)
        elif args.command == 'report':
            table = runner.run_report(args.metrics, force=args.force)
            if args.output:
                table.to_csv(args.output, index=False)
                print(f"✓ Table written to {args.output}")
        return 0

    except KeyboardInterrupt:
        print("\n\nInterrupted by user")
        return 1
    except ExptError as e:
        print(f"\n✗ {type(e).__name__}: {e}", file=sys.stderr)
        if args.traceback:
            traceback.print_exc()
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
