#!/usr/bin/env python3

"""
Training workflow: procedural dataset, pair generation and model training
"""

import os
import sys
import time
from typing import Dict, Iterable

import numpy as np

from common import cli
from common.config import PATHS, SUCCESS_MESSAGES
from common.errors import ConfigError
from common.image_io import load_image_directory
from common.run_config import RunConfig
from common.utils import format_duration, print_info, print_section_header, print_success
from trainer.pair_tracker import PairTracker, family_schedule
from trainer.texture_generator import generate_dataset, write_dataset
from trainer.training_loop import make_training_pair, train
from trainer.transforms import TransformSpec, sample_transform, specs_from_config


def transform_specs(cfg: RunConfig, families: Iterable[str]) -> Dict[str, TransformSpec]:
    try:
        return specs_from_config(cfg.transforms, list(dict.fromkeys(families)))
    except ValueError as e:
        raise ConfigError(str(e)) from e


def synthesize_command(cfg: RunConfig):
    """Write a procedural dataset to the images directory"""
    print_section_header("Synthesizing Dataset")
    size = cfg.data.image_size
    images = generate_dataset(cfg.data.dataset_size, (size, size), cfg.train.seed)
    write_dataset(images, cfg.data.images_dir)
    print_success(SUCCESS_MESSAGES["images_synthesized"].format(count=len(images), path=cfg.data.images_dir))


def make_pairs_command(cfg: RunConfig):
    """Generate pair directories with known transforms"""
    print_section_header("Generating Pairs")
    sources = load_image_directory(cfg.data.images_dir, cfg.image.target_spacing_mm)
    print_info(f"Found {len(sources)} source images")

    families = family_schedule(cfg.data.pair_family, cfg.transforms.evaluation_families, cfg.data.pair_count)
    specs = transform_specs(cfg, families)
    tracker = PairTracker(cfg.data.pairs_dir)
    rng = np.random.default_rng(cfg.train.seed)

    for index, family in enumerate(families):
        source_path, image = sources[int(rng.integers(0, len(sources)))]
        transform = sample_transform(specs[family], rng, image.shape)
        pair = make_training_pair(image, transform, family, cfg.mask)
        pair_id = tracker.generate_pair_id(source_path, index, cfg.train.seed)
        tracker.write_pair(pair_id, pair, source_path)

    tracker.print_tracking_status()
    print_success(SUCCESS_MESSAGES["pairs_written"].format(count=len(families), path=cfg.data.pairs_dir))


def train_command(cfg: RunConfig):
    """Train from scratch on the images directory"""
    sources = load_image_directory(cfg.data.images_dir, cfg.image.target_spacing_mm)
    started = time.time()
    result = train(
        cfg.train,
        [image for _, image in sources],
        cfg.run_path("checkpoints"),
        model_config=cfg.model.to_model_config(),
        transform_specs=transform_specs(cfg, cfg.train.families),
        mask_config=cfg.mask,
        log_path=cfg.run_path("logs", PATHS["training_log"])
    )
    print_info(f"Training took {format_duration(time.time() - started)}; log: {result.log_path}")
    print_success(SUCCESS_MESSAGES["training_complete"].format(path=os.path.basename(result.checkpoint_path)))


HANDLERS = {
    "synthesize": synthesize_command,
    "make-pairs": make_pairs_command,
    "train": train_command
}


def main():
    """Command line interface for training"""
    sys.exit(cli.main(commands=HANDLERS, prog="python -m trainer.main"))


if __name__ == "__main__":
    main()
