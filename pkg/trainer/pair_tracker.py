"""
Pair Directory Store
One directory per synthetic pair: reference, target, both valid masks and the
transform record. Pair ids are derived from the source image, index and seed.
"""

import hashlib
import json
import os
import time
from typing import Dict, List, Optional, Tuple

from common.config import PATHS
from common.errors import DataError
from common.image_io import load_grayscale, load_mask, save_grayscale, save_mask
from common.utils import atomic_write_json, format_size, print_info, print_warning
from trainer.training_loop import TrainingPair
from trainer.transforms import transform_from_dict, transform_to_dict


class PairTracker:
    def __init__(self, pairs_directory: str = None):
        self.pairs_directory = pairs_directory or PATHS["pairs_directory"]
        self.pair_files = PATHS["pair_files"]

        os.makedirs(self.pairs_directory, exist_ok=True)

    def generate_pair_id(self, source_path: str, index: int, seed: int) -> str:
        """Generate a stable pair ID from source path, index and seed"""
        key = f"{os.path.abspath(source_path)}:{index}:{seed}"
        return hashlib.md5(key.encode()).hexdigest()[:12]

    def pair_path(self, pair_id: str) -> str:
        return os.path.join(self.pairs_directory, f"pair_{pair_id}")

    def write_pair(self, pair_id: str, pair: TrainingPair, source_path: str = "") -> str:
        pair_dir = self.pair_path(pair_id)
        os.makedirs(pair_dir, exist_ok=True)

        save_grayscale(os.path.join(pair_dir, self.pair_files["reference"]), pair.reference)
        save_grayscale(os.path.join(pair_dir, self.pair_files["target"]), pair.target)
        save_mask(os.path.join(pair_dir, self.pair_files["reference_mask"]), pair.reference_mask)
        save_mask(os.path.join(pair_dir, self.pair_files["target_mask"]), pair.target_mask)

        # Written last so a complete record implies complete images
        atomic_write_json(os.path.join(pair_dir, self.pair_files["transform"]), {
            "pair_id": pair_id,
            "family": pair.family,
            "source_path": os.path.abspath(source_path) if source_path else "",
            "spacing": list(pair.reference.spacing),
            "created_at": time.time(),
            "transform": transform_to_dict(pair.transform)
        })
        return pair_dir

    def get_pair_status(self, pair_dir: str) -> str:
        """'complete', 'partial' or 'not_found'"""
        if not os.path.isdir(pair_dir):
            return "not_found"
        present = [os.path.exists(os.path.join(pair_dir, name)) for name in self.pair_files.values()]
        return "complete" if all(present) else "partial"

    def list_pairs(self) -> Dict[str, str]:
        """{pair_dir: status} for every sub-directory, sorted by name"""
        result = {}
        for name in sorted(os.listdir(self.pairs_directory)):
            path = os.path.join(self.pairs_directory, name)
            if os.path.isdir(path):
                result[path] = self.get_pair_status(path)
        return result

    def load_pair(self, pair_dir: str) -> Tuple[str, TrainingPair]:
        """Returns (pair_id, pair); DataError on a partial or unreadable directory"""
        if self.get_pair_status(pair_dir) != "complete":
            raise DataError(f"Incomplete pair directory: {pair_dir}")

        try:
            with open(os.path.join(pair_dir, self.pair_files["transform"]), "r", encoding="utf-8") as f:
                record = json.load(f)
            transform = transform_from_dict(record["transform"])
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
            raise DataError(f"Unreadable transform record in {pair_dir}: {e}") from e

        pair = TrainingPair(
            reference=load_grayscale(os.path.join(pair_dir, self.pair_files["reference"])),
            target=load_grayscale(os.path.join(pair_dir, self.pair_files["target"])),
            reference_mask=load_mask(os.path.join(pair_dir, self.pair_files["reference_mask"])),
            target_mask=load_mask(os.path.join(pair_dir, self.pair_files["target_mask"])),
            transform=transform,
            family=record.get("family", transform.family)
        )
        return record.get("pair_id", os.path.basename(pair_dir)), pair

    def load_complete_pairs(self) -> List[Tuple[str, str, TrainingPair]]:
        """(pair_id, pair_dir, pair) for every readable pair; others are skipped with a warning"""
        loaded = []
        for pair_dir, status in self.list_pairs().items():
            if status != "complete":
                print_warning(f"Skipping partial pair directory: {os.path.basename(pair_dir)}")
                continue
            try:
                pair_id, pair = self.load_pair(pair_dir)
            except DataError as e:
                print_warning(f"Skipping {os.path.basename(pair_dir)}: {e}")
                continue
            loaded.append((pair_id, pair_dir, pair))
        return loaded

    def get_tracking_stats(self) -> Dict:
        pairs = self.list_pairs()
        families: Dict[str, int] = {}
        total_size = 0
        for pair_dir, status in pairs.items():
            for name in os.listdir(pair_dir):
                total_size += os.path.getsize(os.path.join(pair_dir, name))
            if status != "complete":
                continue
            try:
                with open(os.path.join(pair_dir, self.pair_files["transform"]), "r", encoding="utf-8") as f:
                    family = json.load(f).get("family", "unknown")
            except (OSError, json.JSONDecodeError):
                family = "unknown"
            families[family] = families.get(family, 0) + 1

        return {
            "total_pairs": len(pairs),
            "complete_pairs": sum(1 for s in pairs.values() if s == "complete"),
            "partial_pairs": sum(1 for s in pairs.values() if s == "partial"),
            "total_size": total_size,
            "families": families
        }

    def print_tracking_status(self):
        stats = self.get_tracking_stats()

        print_info("Pair Store Status:")
        print(f"  📁 Pair directories: {stats['total_pairs']}")
        print(f"  ✅ Complete: {stats['complete_pairs']}")
        print(f"  ⚠️ Partial: {stats['partial_pairs']}")
        print(f"  💾 Total size: {format_size(stats['total_size'])}")
        print(f"  🔀 Families: {dict(stats['families'])}")


def family_schedule(family: Optional[str], families: List[str], count: int) -> List[str]:
    """A single family repeated, or the evaluation families in rotation for 'all'"""
    if family and family != "all":
        return [family] * count
    return [families[i % len(families)] for i in range(count)]
