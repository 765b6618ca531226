"""Command-line entry point: ``decsal <stage> --config exp.toml --out runs/x``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, ExperimentConfig, load_config, validate
from .data import DataError
from .evaluation import EvaluationError
from .model import ModelError
from .numerics import NumericError
from .pipeline import STAGES, Experiment, StageError, run_experiment
from .saliency import SaliencyError
from .vocab import VocabError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

# which stages each subcommand runs
COMMANDS = {
    "synth": ("data",),
    "vocab": ("data", "vocab"),
    "pretrain": ("pretrain",),
    "finetune": ("finetune",),
    "explain": ("explain",),
    "game": ("game",),
    "overlap": ("overlap",),
    "report": ("report",),
    "run": STAGES,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decsal", description="Decoded layer saliency toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate the dataset and pretraining corpus",
        "vocab": "generate data (if configured) and build the vocabulary",
        "pretrain": "masked-token pretraining",
        "finetune": "fine-tune the classifier (LM head frozen)",
        "explain": "per-input saliency JSON for the evaluation split",
        "game": "hiding/revealing curves and AUC table",
        "overlap": "class token rankings, overlap sweep and word-cloud weights",
        "report": "SVG plots and HTML highlights",
        "run": "every stage in order",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="experiment TOML (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output directory (overrides io.out)")
        p.add_argument("--layer", type=int, action="append", help="layer to explain (repeatable)")
        p.add_argument("--method", choices=("gradcam", "simple"), help="single saliency method")
        p.add_argument("--tau", type=int, help="top-tau restriction (0 = unrestricted)")
        p.add_argument("--k", type=int, action="append", help="overlap k (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else validate(ExperimentConfig())
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        cfg.seed = args.seed
    if args.layer:
        cfg.saliency.layers = list(args.layer)
    if args.method:
        cfg.saliency.methods = [args.method]
    if args.tau is not None:
        cfg.saliency.tau = args.tau
    if args.k:
        cfg.evaluation.ks = list(args.k)
    if args.out:
        cfg.io.out = args.out
    return validate(cfg)


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, VocabError, EvaluationError, OSError)):
        return EXIT_DATA
    if isinstance(exc, (ModelError, SaliencyError)):
        return EXIT_DATA
    return EXIT_FAIL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        stages = COMMANDS[args.command]
        if args.command == "synth" and cfg.data.source != "synthetic":
            raise ConfigError("synth needs data.source = 'synthetic'")
        if args.command == "run":
            out = run_experiment(cfg)
        else:
            exp = Experiment(cfg)
            for stage in stages:
                exp.run_stage(stage)
            out = exp.out
    except Exception as exc:       # mapped to documented exit codes
        print(f"decsal: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
