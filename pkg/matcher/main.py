#!/usr/bin/env python3

"""
Matching workflow: inference, evaluation, baseline comparison and plots
"""

import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

from common import cli
from common.checkpoint_store import CheckpointStore, load_checkpoint
from common.config import ERROR_MESSAGES, SUCCESS_MESSAGES
from common.errors import CheckpointError, DataError
from common.network import LandmarkMatcher
from common.run_config import RunConfig
from common.utils import print_info, print_section_header, print_success, print_warning
from matcher.baseline import (
    ClassicKeypoint, baseline_match, compute_descriptors, detect_keypoints_dog, export_keypoints_csv,
    import_keypoints_csv
)
from matcher.evaluation import EvalReport, PairEvaluation, evaluate_pair, load_report_curves, summarize
from matcher.inference import MatchSet, infer_pair
from matcher.plotting import plot_cumulative_curves, plot_matches
from trainer.pair_tracker import PairTracker
from trainer.training_loop import TrainingPair

T = TypeVar("T")
R = TypeVar("R")

LoadedPair = Tuple[str, str, TrainingPair]


def map_pairs(fn: Callable[[T], R], items: Sequence[T], jobs: int) -> List[R]:
    """Order-preserving fan-out over pairs"""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def load_pairs(cfg: RunConfig) -> List[LoadedPair]:
    tracker = PairTracker(cfg.data.pairs_dir)
    listed = tracker.list_pairs()
    if not listed:
        raise DataError(ERROR_MESSAGES["no_pairs"] + f" ({cfg.data.pairs_dir})")
    pairs = tracker.load_complete_pairs()
    if not pairs:
        raise DataError(ERROR_MESSAGES["all_pairs_skipped"])
    print_info(f"Loaded {len(pairs)} of {len(listed)} pair directories")
    return pairs


def resolve_checkpoint(cfg: RunConfig) -> str:
    path = cfg.data.checkpoint or CheckpointStore(cfg.run_path("checkpoints")).latest()
    if not path or not os.path.isfile(path):
        raise CheckpointError(ERROR_MESSAGES["missing_checkpoint"].format(path=path or cfg.run_path("checkpoints")))
    return path


def matches_path(cfg: RunConfig, pair_dir: str) -> str:
    return cfg.run_path("matches", f"{os.path.basename(pair_dir)}.csv")


def run_inference(cfg: RunConfig, model: LandmarkMatcher, loaded: LoadedPair) -> MatchSet:
    pair_id, pair_dir, pair = loaded
    matches = infer_pair(model, pair.reference, pair.target, cfg.inference.thresh_landmark,
                         cfg.inference.cell_px, pair.reference_mask, pair.target_mask)
    matches.write_csv(matches_path(cfg, pair_dir))
    if cfg.visualize:
        plot_matches(pair.reference, pair.target, matches,
                     cfg.run_path("plots", f"matches_{os.path.basename(pair_dir)}.png"),
                     title=f"{pair_id} ({pair.family})")
    return matches


def infer_command(cfg: RunConfig):
    """Match every complete pair directory with the trained model"""
    print_section_header("Inference")
    model, _ = load_checkpoint(resolve_checkpoint(cfg))
    pairs = load_pairs(cfg)

    results = map_pairs(lambda loaded: run_inference(cfg, model, loaded), pairs, cfg.jobs)
    for (pair_id, _, pair), matches in zip(pairs, results):
        print_info(f"{pair_id} [{pair.family}]: {len(matches)} matches")
    print_success(SUCCESS_MESSAGES["matches_written"].format(count=len(pairs), path=cfg.run_path("matches")))


def _spacing(pair: TrainingPair) -> float:
    return float(pair.reference.spacing[0])


def finish_report(cfg: RunConfig, evaluations: List[PairEvaluation], stem: str) -> EvalReport:
    report = summarize(evaluations, cfg.evaluation.curve_thresholds_mm,
                       cfg.evaluation.within_mm, cfg.evaluation.gross_error_mm)
    paths = report.write(cfg.run_path("reports"), stem)
    print(report.to_text_table())
    if report.warning:
        print_warning("Some method/family groups produced no matches")
    print_success(SUCCESS_MESSAGES["report_written"].format(path=paths["text"]))
    return report


def evaluate_command(cfg: RunConfig):
    """Evaluate stored match files against the known pair transforms"""
    print_section_header("Evaluation")
    evaluations = []
    for pair_id, pair_dir, pair in load_pairs(cfg):
        path = matches_path(cfg, pair_dir)
        if not os.path.isfile(path):
            print_warning(f"No matches for {os.path.basename(pair_dir)}; run infer first")
            continue
        matches = MatchSet.read_csv(path)
        evaluations.append(evaluate_pair(pair_id, pair.family, "proposed", matches, pair.transform, _spacing(pair)))

    if not evaluations:
        raise DataError(ERROR_MESSAGES["all_pairs_skipped"])
    finish_report(cfg, evaluations, "report")


def baseline_keypoints(cfg: RunConfig, pair_dir: str, pair: TrainingPair) -> Tuple[List[ClassicKeypoint], List[ClassicKeypoint]]:
    """Imported keypoints when available for this pair, else the built-in DoG detector"""
    if cfg.import_keypoints:
        folder = os.path.join(cfg.import_keypoints, os.path.basename(pair_dir))
        reference_csv = os.path.join(folder, "reference.csv")
        target_csv = os.path.join(folder, "target.csv")
        if os.path.isfile(reference_csv) and os.path.isfile(target_csv):
            return import_keypoints_csv(reference_csv), import_keypoints_csv(target_csv)
        print_warning(f"No imported keypoints for {os.path.basename(pair_dir)}; using the DoG detector")

    b = cfg.baseline
    described = []
    for image in (pair.reference, pair.target):
        kps = detect_keypoints_dog(image, b.octaves, b.scales_per_octave, b.contrast_thresh, b.sigma, b.border_px)
        described.append(compute_descriptors(image, kps, b.descriptor_clip))

    name = os.path.basename(pair_dir)
    export_keypoints_csv(cfg.run_path("matches", f"{name}_reference_keypoints.csv"), described[0])
    export_keypoints_csv(cfg.run_path("matches", f"{name}_target_keypoints.csv"), described[1])
    return described[0], described[1]


def compare_pair(cfg: RunConfig, model: Optional[LandmarkMatcher], loaded: LoadedPair) -> List[PairEvaluation]:
    pair_id, pair_dir, pair = loaded
    stored = matches_path(cfg, pair_dir)
    if os.path.isfile(stored):
        proposed = MatchSet.read_csv(stored)
    else:
        proposed = run_inference(cfg, model, loaded)

    kps1, kps2 = baseline_keypoints(cfg, pair_dir, pair)
    method_matches = {
        "proposed": proposed,
        "baseline-inverse-consistency": baseline_match(kps1, kps2, "inverse-consistency"),
        "baseline-ratio-test": baseline_match(kps1, kps2, "ratio-test", cfg.baseline.ratio)
    }
    return [
        evaluate_pair(pair_id, pair.family, method, matches, pair.transform, _spacing(pair))
        for method, matches in method_matches.items()
    ]


def compare_baseline_command(cfg: RunConfig):
    """Proposed model and both DoG baselines on the same pairs"""
    print_section_header("Baseline Comparison")
    pairs = load_pairs(cfg)

    model = None
    if any(not os.path.isfile(matches_path(cfg, pair_dir)) for _, pair_dir, _ in pairs):
        model, _ = load_checkpoint(resolve_checkpoint(cfg))

    per_pair = map_pairs(lambda loaded: compare_pair(cfg, model, loaded), pairs, cfg.jobs)
    report = finish_report(cfg, [e for group in per_pair for e in group], "comparison")

    path = plot_cumulative_curves(report.curves, cfg.run_path("plots", "comparison_cumulative.png"))
    print_success(SUCCESS_MESSAGES["plot_written"].format(path=path))


def plot_command(cfg: RunConfig):
    """Cumulative curves from the comparison report, else the evaluation report"""
    print_section_header("Plotting")
    for stem in ("comparison", "report"):
        path = cfg.run_path("reports", f"{stem}.json")
        if os.path.isfile(path):
            break
    else:
        raise DataError(f"No report found in {cfg.run_path('reports')}; run evaluate or compare-baseline first")

    output = plot_cumulative_curves(load_report_curves(path), cfg.run_path("plots", f"{stem}_cumulative.png"))
    print_success(SUCCESS_MESSAGES["plot_written"].format(path=output))


HANDLERS = {
    "infer": infer_command,
    "evaluate": evaluate_command,
    "compare-baseline": compare_baseline_command,
    "plot": plot_command
}


def main():
    """Command line interface for matching and evaluation"""
    sys.exit(cli.main(commands=HANDLERS, prog="python -m matcher.main"))


if __name__ == "__main__":
    main()
