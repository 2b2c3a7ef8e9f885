"""``remixsep`` command line: gen-data, train, eval and sweep."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from remixsep.array_sim import generate_dataset
from remixsep.config import RunConfig, get_runtime_config
from remixsep.errors import ConfigError, DivergenceError, RemixSepError
from remixsep.metrics import evaluate_checkpoint
from remixsep.trainer import SWEEP_METHODS, seed_sweep, train_stage

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_DIVERGED = 3


def _seed_list(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text}") from e


def _method_list(text: str) -> List[str]:
    methods = [m.strip() for m in text.split(",") if m.strip()]
    unknown = [m for m in methods if m not in SWEEP_METHODS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown method(s) {unknown}; choose from {SWEEP_METHODS}")
    return methods


class _UsageParser(argparse.ArgumentParser):
    """Exit with the usage code instead of argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _UsageParser(prog="remixsep", description="Unsupervised multichannel speech separation lab")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_UsageParser)

    gen = sub.add_parser("gen-data", help="render a simulated 4-mic, 2-source dataset")
    gen.add_argument("--n-train", type=int, required=True)
    gen.add_argument("--n-val", type=int, required=True)
    gen.add_argument("--n-test", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", type=Path, required=True, help="output directory")
    gen.add_argument("--duration", type=float, default=3.0, help="seconds per utterance")
    gen.add_argument("--n-clean", type=int, default=None, help="clean pool size (default: n-train)")

    train = sub.add_parser("train", help="run one training stage")
    train.add_argument("--stage", choices=("al", "rccl", "pit"), required=True)
    train.add_argument("--config", type=Path, required=True)
    train.add_argument("--init", type=Path, default=None, help="stage-1 checkpoint for rccl")
    train.add_argument("--resume", type=Path, default=None, help="checkpoint of this stage to continue")
    train.add_argument("--seed", type=int, default=None, help="override [train] seed")

    ev = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    ev.add_argument("--checkpoint", type=Path, default=None)
    ev.add_argument("--manifest", type=Path, required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--oracle", action="store_true", help="use ideal ratio masks instead of a checkpoint")
    ev.add_argument("--mvdr-form", choices=("inverse", "literal"), default=None)
    ev.add_argument("--out", type=Path, default=Path("metrics.csv"), help="metric CSV path")

    sweep = sub.add_parser("sweep", help="train and evaluate several seeds per method")
    sweep.add_argument("--seeds", type=_seed_list, required=True, help="e.g. 1,2,3")
    sweep.add_argument("--methods", type=_method_list, default=list(SWEEP_METHODS),
                       help="comma-separated subset of al,al+rccl,pit")
    sweep.add_argument("--config", type=Path, required=True)
    sweep.add_argument("--out", type=Path, default=None, help="report directory")
    sweep.add_argument("--workers", type=int, default=None)
    return parser


def cmd_gen_data(args) -> int:
    summary = generate_dataset(args.n_train, args.n_val, args.n_test, args.seed, args.out,
                               duration=args.duration, n_clean=args.n_clean)
    print(json.dumps({"manifest": str(summary.manifest_path), "counts": summary.counts}, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    config = RunConfig.from_file(args.config)
    overrides = {} if args.seed is None else {"seed": args.seed}
    cfg = config.to_train_config(args.stage, **overrides)
    result = train_stage(cfg, init=args.init, resume=args.resume)
    print(json.dumps({"stage": result.stage, "checkpoint": str(result.checkpoint),
                      "last_checkpoint": str(result.last_checkpoint),
                      "run_log": str(result.run_log), "param_hash": result.param_hash}, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.oracle and args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint unless --oracle is given")
    report = evaluate_checkpoint(args.checkpoint, args.manifest, split=args.split, out_csv=args.out,
                                 oracle=args.oracle, mvdr_form=args.mvdr_form,
                                 workers=get_runtime_config()["workers"])
    print(json.dumps({"csv": str(args.out), **report.aggregates()}, indent=2))
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = RunConfig.from_file(args.config)
    workers = args.workers or get_runtime_config()["workers"]
    report = seed_sweep(config.stage_configs(), args.seeds, methods=args.methods,
                        out_dir=args.out, workers=workers, eval_split=config.get("eval", "split"))
    print(json.dumps({"stability_csv": str(report.stability_csv),
                      "summary_csv": str(report.summary_csv),
                      "failed": [f"{r.method}/{r.seed}" for r in report.failed]}, indent=2))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    runtime = get_runtime_config()
    logging.basicConfig(level=getattr(logging, runtime["log_level"], logging.INFO))
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as e:
        logger.error(f"Training diverged: {str(e)} (last good checkpoint: {e.last_checkpoint})")
        return EXIT_DIVERGED
    except ConfigError as e:
        logger.error(f"Configuration error: {str(e)}")
        return EXIT_USAGE
    except RemixSepError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly: {type(e).__name__}: {str(e)}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
