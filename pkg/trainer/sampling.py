"""
Parameter-free sampling layer: grid-constrained landmark selection and
on-the-fly ground truth from the known transform.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from common.image_io import BinaryMask
from common.utils import atomic_write_text
from trainer.transforms import Transform, project_points

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LandmarkSet:
    """points (K, 2) int (row, col), probs (K,) aligned; ordered by descending probability"""
    points: np.ndarray
    probs: np.ndarray

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    @classmethod
    def empty(cls) -> "LandmarkSet":
        return cls(np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.float64))

    def subset(self, keep: np.ndarray) -> "LandmarkSet":
        return LandmarkSet(self.points[keep], self.probs[keep])


@dataclass(frozen=True)
class GroundTruth:
    p1: np.ndarray  # (K1,) {0,1}
    p2: np.ndarray  # (K2,) {0,1}
    c: np.ndarray   # (K1, K2) {0,1}

    @property
    def k_pos(self) -> int:
        return int(self.c.sum())

    @property
    def k_neg(self) -> int:
        return int(self.c.size - self.c.sum())


def grid_sample_landmarks(prob_map: np.ndarray, mask: BinaryMask, cell_px: int, K: int) -> LandmarkSet:
    """
    One landmark per cell_px x cell_px cell at the masked argmax (ties: lowest
    row-major index), then the K cells with the highest maxima (ties: lowest
    cell index). Fewer than K valid cells returns them all.
    """
    if cell_px < 1:
        raise ValueError(f"cell_px must be >= 1, got {cell_px}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")

    prob_map = np.asarray(prob_map, dtype=np.float64)
    if prob_map.shape != mask.shape:
        raise ValueError(f"prob_map {prob_map.shape} and mask {mask.shape} differ in shape")

    height, width = prob_map.shape
    rows_c = -(-height // cell_px)
    cols_c = -(-width // cell_px)

    padded = np.full((rows_c * cell_px, cols_c * cell_px), -np.inf)
    padded[:height, :width] = np.where(mask.values == 1, prob_map, -np.inf)

    # (cell_row, cell_col, in-cell flattened row-major)
    cells = padded.reshape(rows_c, cell_px, cols_c, cell_px).transpose(0, 2, 1, 3)
    cells = cells.reshape(rows_c * cols_c, cell_px * cell_px)
    local = np.argmax(cells, axis=1)
    values = cells[np.arange(cells.shape[0]), local]

    valid = np.flatnonzero(np.isfinite(values))
    if valid.size == 0:
        return LandmarkSet.empty()

    order = valid[np.lexsort((valid, -values[valid]))][:K]
    cell_r, cell_c = np.divmod(order, cols_c)
    in_r, in_c = np.divmod(local[order], cell_px)
    points = np.stack([cell_r * cell_px + in_r, cell_c * cell_px + in_c], axis=1).astype(np.int64)
    probs = prob_map[points[:, 0], points[:, 1]]
    return LandmarkSet(points, probs)


def gather_probabilities(prob_map: torch.Tensor, landmarks: LandmarkSet) -> torch.Tensor:
    """Differentiable p_hat at the landmark points of an (H, W) map"""
    index = torch.as_tensor(landmarks.points, dtype=torch.long).reshape(-1, 2)
    return prob_map[index[:, 0], index[:, 1]]


def generate_ground_truth(lm1: LandmarkSet, lm2: LandmarkSet, t: Transform,
                          thresh_px: float, mask1: BinaryMask) -> GroundTruth:
    """
    c[i, j] = 1 iff |point_i - phi(point_j)| < thresh_px and phi(point_j) lands
    inside I1 on a mask-1 pixel. Many-to-many labels are kept.
    """
    if thresh_px <= 0:
        raise ValueError(f"thresh_px must be positive, got {thresh_px}")

    k1, k2 = lm1.count, lm2.count
    if k1 == 0 or k2 == 0:
        c = np.zeros((k1, k2), dtype=np.uint8)
        return GroundTruth(np.zeros(k1, dtype=np.uint8), np.zeros(k2, dtype=np.uint8), c)

    projected = project_points(lm2.points.astype(np.float64), t)
    height, width = mask1.shape
    inside = (
        (projected[:, 0] >= 0) & (projected[:, 0] <= height - 1)
        & (projected[:, 1] >= 0) & (projected[:, 1] <= width - 1)
    )
    on_mask = np.zeros(k2, dtype=bool)
    if inside.any():
        rounded = np.rint(projected[inside]).astype(np.int64)
        on_mask[inside] = mask1.values[rounded[:, 0], rounded[:, 1]] == 1

    diff = lm1.points[:, None, :].astype(np.float64) - projected[None, :, :]
    distances = np.sqrt((diff ** 2).sum(axis=2))
    c = ((distances < thresh_px) & on_mask[None, :]).astype(np.uint8)
    return GroundTruth(c.any(axis=1).astype(np.uint8), c.any(axis=0).astype(np.uint8), c)


def export_landmarks_csv(path: str, landmarks: LandmarkSet):
    """Debug export: row,col,prob"""
    lines = ["row,col,prob"]
    for (row, col), prob in zip(landmarks.points, landmarks.probs):
        lines.append(f"{int(row)},{int(col)},{float(prob):.6f}")
    atomic_write_text(path, "\n".join(lines) + "\n")
