"""
Inference: landmark thresholding and inverse-consistent matching
"""

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch

from common.config import INFERENCE_CONFIG, IMAGE_CONFIG
from common.errors import DataError
from common.image_io import BinaryMask, GrayImage, compute_valid_mask, rescale_intensity
from common.network import (
    LandmarkMatcher, descriptor_distances, forward_branch, image_tensor, match_head, sample_descriptors
)
from common.utils import atomic_write_text
from trainer.sampling import LandmarkSet, grid_sample_landmarks

logger = logging.getLogger(__name__)

MATCH_CSV_HEADER = ["row1", "col1", "row2", "col2", "match_prob", "desc_dist2"]


@dataclass(frozen=True)
class MatchPair:
    pt1: Tuple[float, float]
    pt2: Tuple[float, float]
    match_prob: float
    desc_dist2: float
    index1: int = -1
    index2: int = -1


@dataclass
class MatchSet:
    """One-to-one landmark correspondences between a reference and a target image"""
    pairs: List[MatchPair] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def points1(self) -> np.ndarray:
        return np.asarray([p.pt1 for p in self.pairs], dtype=np.float64).reshape(-1, 2)

    @property
    def points2(self) -> np.ndarray:
        return np.asarray([p.pt2 for p in self.pairs], dtype=np.float64).reshape(-1, 2)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(MATCH_CSV_HEADER)
        for p in self.pairs:
            writer.writerow([_fmt(p.pt1[0]), _fmt(p.pt1[1]), _fmt(p.pt2[0]), _fmt(p.pt2[1]),
                             _fmt(p.match_prob), _fmt(p.desc_dist2)])
        return buffer.getvalue()

    def write_csv(self, path: str):
        atomic_write_text(path, self.to_csv())

    @classmethod
    def read_csv(cls, path: str) -> "MatchSet":
        try:
            with open(path, "r", encoding="utf-8", newline="") as f:
                rows = list(csv.reader(f))
        except OSError as e:
            raise DataError(f"Error reading matches {path}: {e}") from e
        if not rows or rows[0] != MATCH_CSV_HEADER:
            raise DataError(f"{path} is not a match file (expected header {','.join(MATCH_CSV_HEADER)})")

        pairs = []
        for line, row in enumerate(rows[1:], start=2):
            try:
                r1, c1, r2, c2, prob, dist2 = (float(v) for v in row)
            except ValueError as e:
                raise DataError(f"{path}:{line}: malformed match row {row}") from e
            pairs.append(MatchPair((r1, c1), (r2, c2), prob, dist2, line - 2, line - 2))
        return cls(pairs)


def _fmt(value: float) -> str:
    if value != value:
        return "nan"
    if float(value).is_integer():
        return str(int(value))
    return f"{value:.6g}"


def inverse_consistent_match(c_hat: np.ndarray, d2: np.ndarray) -> List[Tuple[int, int]]:
    """
    (i, j) is kept iff each is the other's best under match probability AND
    under descriptor distance. Ties go to the lower index (np.argmax/argmin).
    """
    c_hat = np.asarray(c_hat, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    if c_hat.shape != d2.shape or c_hat.ndim != 2:
        raise ValueError(f"c_hat {c_hat.shape} and d2 {d2.shape} must be aligned 2-D matrices")
    if 0 in c_hat.shape:
        return []

    best_j_prob = np.argmax(c_hat, axis=1)
    best_i_prob = np.argmax(c_hat, axis=0)
    best_j_dist = np.argmin(d2, axis=1)
    best_i_dist = np.argmin(d2, axis=0)

    ids1 = np.arange(c_hat.shape[0])
    keep = (
        (best_i_prob[best_j_prob] == ids1)
        & (best_j_dist == best_j_prob)
        & (best_i_dist[best_j_prob] == ids1)
    )
    return [(int(i), int(best_j_prob[i])) for i in ids1[keep]]


def valid_mask_for(img: GrayImage, threshold_fraction: Optional[float] = None,
                   min_component_px: Optional[int] = None) -> BinaryMask:
    threshold_fraction = IMAGE_CONFIG["mask_threshold_fraction"] if threshold_fraction is None else threshold_fraction
    return compute_valid_mask(img, threshold_fraction * img.max_intensity, min_component_px)


def detect_candidates(model: LandmarkMatcher, images: List[GrayImage], masks: List[BinaryMask],
                      cell_px: int, thresh_landmark: float):
    """Every valid cell's landmark, then only those with p_hat > thresh_landmark"""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        batch = [image_tensor(rescale_intensity(img.pixels), dtype)[None] for img in images]
        results = [forward_branch(model, x) for x in batch]

    candidates = []
    for (prob, pyramids), mask in zip(results, masks):
        prob_map = prob[0].cpu().numpy()
        all_cells = -(-mask.shape[0] // cell_px) * -(-mask.shape[1] // cell_px)
        landmarks = grid_sample_landmarks(prob_map, mask, cell_px, all_cells)
        kept = landmarks.subset(landmarks.probs > thresh_landmark) if landmarks.count else LandmarkSet.empty()
        candidates.append((kept, pyramids[0]))
    return candidates


def infer_pair(model: LandmarkMatcher, I1: GrayImage, I2: GrayImage,
               thresh_landmark: Optional[float] = None, cell_px: Optional[int] = None,
               mask1: Optional[BinaryMask] = None, mask2: Optional[BinaryMask] = None) -> MatchSet:
    """
    Match landmarks of I2 (target) to I1 (reference). Images are expected at
    isotropic spacing; masks default to the valid mask of each image.
    """
    thresh_landmark = INFERENCE_CONFIG["thresh_landmark"] if thresh_landmark is None else thresh_landmark
    cell_px = cell_px or INFERENCE_CONFIG["cell_px"]
    mask1 = mask1 if mask1 is not None else valid_mask_for(I1)
    mask2 = mask2 if mask2 is not None else valid_mask_for(I2)

    model.eval()
    (lm1, pyramid1), (lm2, pyramid2) = detect_candidates(model, [I1, I2], [mask1, mask2], cell_px, thresh_landmark)
    logger.debug("Candidates above %.3f: %d / %d", thresh_landmark, lm1.count, lm2.count)
    if lm1.count == 0 or lm2.count == 0:
        return MatchSet()

    with torch.no_grad():
        f1 = sample_descriptors(pyramid1, lm1.points)
        f2 = sample_descriptors(pyramid2, lm2.points)
        c_hat = match_head(model, f1, f2).double().cpu().numpy()
        d2 = descriptor_distances(f1, f2).double().cpu().numpy()

    pairs = [
        MatchPair(
            pt1=(float(lm1.points[i, 0]), float(lm1.points[i, 1])),
            pt2=(float(lm2.points[j, 0]), float(lm2.points[j, 1])),
            match_prob=float(c_hat[i, j]),
            desc_dist2=float(d2[i, j]),
            index1=i,
            index2=j
        )
        for i, j in inverse_consistent_match(c_hat, d2)
    ]
    return MatchSet(pairs)
