"""
Shared command-line surface for the trainer and matcher entry points
"""

import argparse
import logging
import sys
from typing import Callable, Dict, Iterable, List, Optional

from common.config import ERROR_MESSAGES, EXIT_CODES
from common.errors import ConfigError, DataError, NumericError, TrainingDivergedError
from common.run_config import RunConfig, parse_config, write_effective_config
from common.utils import load_environment, print_error, print_info, setup_logging

logger = logging.getLogger(__name__)

Handler = Callable[[RunConfig], None]

COMMAND_HELP = {
    "synthesize": "Write a procedural textured image dataset",
    "make-pairs": "Generate transformed pair directories from source images",
    "train": "Train the landmark model from scratch",
    "infer": "Match landmarks for every pair directory",
    "evaluate": "Evaluate stored matches against the known transforms",
    "compare-baseline": "Evaluate the model and both DoG baselines side by side",
    "plot": "Draw cumulative error curves from the latest report"
}

# flag dest -> dotted config path
FLAG_TARGETS = {
    "seed": "seed",
    "jobs": "jobs",
    "thresh_landmark": "thresh_landmark",
    "m_pos": "m_pos",
    "m_neg": "m_neg",
    "k": "K",
    "cell_px": "cell_px",
    "epochs": "epochs",
    "output_dir": "output_dir",
    "import_keypoints": "import_keypoints",
    "name": "name",
    "images_dir": "data.images_dir",
    "pairs_dir": "data.pairs_dir",
    "checkpoint": "data.checkpoint",
    "family": "data.pair_family",
    "visualize": "visualize"
}


def _add_common_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="YAML or TOML run configuration")
    parser.add_argument("--name", help="Run name (runs/<name>/)")
    parser.add_argument("--output-dir", help="Parent directory of run directories")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--jobs", type=int, help="Parallel pairs for infer/evaluate")
    parser.add_argument("--thresh-landmark", type=float)
    parser.add_argument("--m-pos", type=float)
    parser.add_argument("--m-neg", type=float)
    parser.add_argument("--k", type=int, help="Landmarks per image during training")
    parser.add_argument("--cell-px", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--import-keypoints", help="Directory of external keypoint CSVs per pair")
    parser.add_argument("--images-dir")
    parser.add_argument("--pairs-dir")
    parser.add_argument("--checkpoint")
    parser.add_argument("--family", help="Transform family for make-pairs, or 'all'")
    parser.add_argument("--count", type=int, help="Images for synthesize, pairs for make-pairs")
    parser.add_argument("--visualize", action="store_true", default=None)
    parser.add_argument("--verbose", action="store_true")


def build_parser(prog: str, commands: Iterable[str]) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=prog)
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True
    for command in commands:
        _add_common_flags(subparsers.add_parser(command, help=COMMAND_HELP.get(command)))
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, object]:
    overrides = {}
    for dest, target in FLAG_TARGETS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[target] = value
    if getattr(args, "count", None) is not None:
        key = "data.dataset_size" if args.command == "synthesize" else "data.pair_count"
        overrides[key] = args.count
    return overrides


def command_handlers() -> Dict[str, Handler]:
    from matcher.main import HANDLERS as MATCHER_HANDLERS
    from trainer.main import HANDLERS as TRAINER_HANDLERS

    return {**TRAINER_HANDLERS, **MATCHER_HANDLERS}


def run(command: str, cfg: RunConfig, handlers: Optional[Dict[str, Handler]] = None) -> int:
    """Run one command; returns the process exit code"""
    handlers = handlers or command_handlers()
    handler = handlers.get(command)
    if handler is None:
        print_error(ERROR_MESSAGES["unknown_command"].format(command=command))
        return EXIT_CODES["config_error"]

    try:
        cfg.validate()
        cfg.ensure_run_dirs()
        write_effective_config(cfg)
        handler(cfg)
    except ConfigError as e:
        print_error(str(e))
        return EXIT_CODES["config_error"]
    except TrainingDivergedError as e:
        print_error(str(e))
        if e.last_checkpoint:
            print_info(f"Last good checkpoint: {e.last_checkpoint}")
        return EXIT_CODES["numeric_error"]
    except NumericError as e:
        print_error(str(e))
        return EXIT_CODES["numeric_error"]
    except DataError as e:
        print_error(str(e))
        return EXIT_CODES["data_error"]
    return EXIT_CODES["success"]


def main(argv: Optional[List[str]] = None, commands: Optional[Iterable[str]] = None,
         prog: Optional[str] = None) -> int:
    handlers = command_handlers()
    commands = list(commands or handlers)
    parser = build_parser(prog or "landmatch", commands)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CODES["success"] if e.code == 0 else EXIT_CODES["config_error"]

    setup_logging("DEBUG" if args.verbose else None)
    load_environment()

    try:
        cfg = parse_config(args.config, overrides_from_args(args))
    except ConfigError as e:
        print_error(str(e))
        return EXIT_CODES["config_error"]

    logger.debug("Running %s with run directory %s", args.command, cfg.run_dir)
    return run(args.command, cfg, handlers)


if __name__ == "__main__":
    sys.exit(main())
